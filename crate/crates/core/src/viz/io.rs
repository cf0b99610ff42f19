//! Binary PPM (P6) and PNG encoding.
//!
//! PPM files are written as `P6\n<width> <height>\n255\n` followed by the raw
//! RGB bytes; the reader also accepts `#` comments and arbitrary whitespace
//! in the header.

use std::path::Path;

use super::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::Image(format!(
                "{}: unsupported format (use .ppm or .png)",
                path.display()
            ))),
        }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Image(format!("PPM truncated before {what}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token("magic")? != "P6" {
        return Err(Error::Image("not a binary PPM (P6) file".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        token(what)?
            .parse::<usize>()
            .map_err(|_| Error::Image(format!("PPM header: invalid {what}")))
    };
    let (width, height, maxval) = (number("width")?, number("height")?, number("maxval")?);
    if maxval != 255 {
        return Err(Error::Image(format!(
            "PPM maxval {maxval} unsupported (only 255)"
        )));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    let start = pos + 1;
    let n = width * height * 3;
    let body = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Image(format!("PPM truncated: expected {n} pixel bytes")))?;
    RgbImage::new(width, height, body.to_vec())
}

pub fn write_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Ppm => std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e)),
        ImageFormat::Png => image::save_buffer(
            path,
            img.data(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display()))),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let named = |e: Error| Error::Image(format!("{}: {e}", path.display()));
    match format {
        ImageFormat::Ppm => decode_ppm(&bytes).map_err(named),
        ImageFormat::Png => {
            let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = decoded.dimensions();
            RgbImage::new(w as usize, h as usize, decoded.into_raw()).map_err(named)
        }
    }
}
