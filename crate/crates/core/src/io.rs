//! Image and raw-array file formats.
//!
//! PNG pixels map to `[-1, 1]` (`v / 127.5 - 1`) and are stored as
//! `[height, width, channels]`. Raw arrays use the NumPy `.npy` format.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, LumaA, Rgb, Rgba};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};

use crate::error::{Error, Result};
use crate::field::{from_vec, Field};

pub fn load_png(path: &Path) -> Result<Field> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (2, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    from_vec(&[h, w, channels], data)
}

/// Whether `field` can be written as a PNG by [`save_png`].
pub fn is_pixel_grid(field: &Field) -> bool {
    match field.shape() {
        [h, w] => *h > 0 && *w > 0,
        [h, w, c] => *h > 0 && *w > 0 && (1..=4).contains(c),
        _ => false,
    }
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn png_bytes(field: &Field) -> Result<Vec<u8>> {
    let (h, w, c) = match field.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] if (1..=4).contains(c) => (*h, *w, *c),
        s => {
            return Err(Error::InvalidRange(format!(
                "shape {s:?} is not a [height, width, channels] pixel grid"
            )))
        }
    };
    let raw: Vec<u8> = field.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (w as u32, h as u32);
    let bad = || Error::InvalidRange("pixel buffer size mismatch".into());
    let img = match c {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).ok_or_else(bad)?),
        2 => DynamicImage::ImageLumaA8(ImageBuffer::<LumaA<u8>, _>::from_raw(w, h, raw).ok_or_else(bad)?),
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).ok_or_else(bad)?),
        _ => DynamicImage::ImageRgba8(ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, raw).ok_or_else(bad)?),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn load_npy(path: &Path) -> Result<Field> {
    let file = fs::File::open(path)?;
    Field::read_npy(file).map_err(|e| Error::Npy(e.to_string()))
}

pub fn npy_bytes(field: &Field) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    field
        .as_standard_layout()
        .write_npy(&mut buf)
        .map_err(|e| Error::Npy(e.to_string()))?;
    Ok(buf)
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
