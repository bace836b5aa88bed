//! On-disk raw array format and PNG export.
//!
//! The raw format is a 16-byte header followed by little-endian floats in
//! row-major order with the channel index innermost:
//!
//! ```text
//! bytes 0..4   magic: "CRFD" (32-bit float payload) or "CRF8" (64-bit)
//! bytes 4..8   u32 height (LE)
//! bytes 8..12  u32 width (LE)
//! bytes 12..16 u32 channels (LE)
//! bytes 16..   height * width * channels floats
//! ```
//!
//! Images and displacement fields use the 32-bit flavor; checkpointed
//! network parameters use the 64-bit flavor so they round-trip bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};

const MAGIC_F32: &[u8; 4] = b"CRFD";
const MAGIC_F64: &[u8; 4] = b"CRF8";

fn write_header(w: &mut impl Write, magic: &[u8; 4], h: u32, width: u32, c: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&h.to_le_bytes())?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&c.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<([u8; 4], usize, usize, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for raw header".into()))?;
    let mut buf = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("file too short for raw header".into()))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    Ok((magic, dims[0], dims[1], dims[2]))
}

fn write_f32_payload(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_payload(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("raw payload shorter than header promises".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Saves an image in the 32-bit raw format (channels = 1).
pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, MAGIC_F32, image.height() as u32, image.width() as u32, 1)?;
    write_f32_payload(&mut w, image.data().iter().copied())?;
    Ok(w.flush()?)
}

/// Loads an image written by [`save_image`].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let (magic, h, w, c) = read_header(&mut r)?;
    if &magic != MAGIC_F32 {
        return Err(Error::Format(format!(
            "expected CRFD magic, got {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    if c != 1 {
        return Err(Error::Format(format!("expected 1 channel for image, got {c}")));
    }
    let values = read_f32_payload(&mut r, h * w)?;
    let data = Array2::from_shape_vec((h, w), values)
        .map_err(|e| Error::Format(format!("bad image payload: {e}")))?;
    Image::new(data)
}

/// Saves a displacement field in the 32-bit raw format (channels = 2).
pub fn save_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, MAGIC_F32, field.height() as u32, field.width() as u32, 2)?;
    write_f32_payload(&mut w, field.data().iter().copied())?;
    Ok(w.flush()?)
}

/// Loads a displacement field written by [`save_field`].
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let mut r = BufReader::new(File::open(path)?);
    let (magic, h, w, c) = read_header(&mut r)?;
    if &magic != MAGIC_F32 {
        return Err(Error::Format(format!(
            "expected CRFD magic, got {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    if c != 2 {
        return Err(Error::Format(format!("expected 2 channels for field, got {c}")));
    }
    let values = read_f32_payload(&mut r, h * w * 2)?;
    let data = Array3::from_shape_vec((h, w, 2), values)
        .map_err(|e| Error::Format(format!("bad field payload: {e}")))?;
    DisplacementField::new(data)
}

/// Saves an arbitrary parameter array in the 64-bit raw flavor. The array is
/// flattened (header = numel x 1 x 1); the true shape lives in the
/// checkpoint's JSON metadata.
pub fn save_f64_array(path: impl AsRef<Path>, array: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, MAGIC_F64, array.len() as u32, 1, 1)?;
    for v in array.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(w.flush()?)
}

/// Loads the flat contents of a 64-bit raw array file.
pub fn load_f64_array(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let (magic, h, w, c) = read_header(&mut r)?;
    if &magic != MAGIC_F64 {
        return Err(Error::Format(format!(
            "expected CRF8 magic, got {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = h * w * c;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("raw payload shorter than header promises".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Exports an image as an 8-bit grayscale PNG, mapping [0, 1] linearly to
/// [0, 255] with clamping.
pub fn save_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (r, row) in img.data().rows().into_iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(c as u32, r as u32, image::Luma([byte]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Exports an `H x W x 3` u8 array as an RGB PNG.
pub fn save_png_rgb(path: impl AsRef<Path>, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            buf.put_pixel(
                col as u32,
                r as u32,
                image::Rgb([rgb[[r, col, 0]], rgb[[r, col, 1]], rgb[[r, col, 2]]]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}
