//! Label maps on disk and their colour rendering.
//!
//! Label maps are written losslessly as single-channel PNGs: 8-bit indexed
//! with the fixed palette when every label fits in a byte, 16-bit grayscale
//! otherwise. Evaluation reads only these raw maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{Rgb, RgbImage};
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, LabelMap};

/// 256-entry colour table; entry `i` is a fixed hash of `i`.
pub fn palette() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        *entry = label_color(i as u32);
    }
    table
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Colour of a label id. Labels beyond 255 get their own hashed colour too.
pub fn label_color(label: u32) -> [u8; 3] {
    let h = splitmix64(label as u64).to_le_bytes();
    [h[0], h[1], h[2]]
}

/// Writes `labels` as a lossless PNG.
pub fn write_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    let (h, w) = labels.dims();
    let max = labels.max_label();
    if max > u16::MAX as u32 {
        return Err(Error::InvalidImage(format!("label {max} does not fit in 16 bits")));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    let data: Vec<u8> = if max < 256 {
        enc.set_color(ColorType::Indexed);
        enc.set_depth(BitDepth::Eight);
        enc.set_palette(palette().concat());
        labels.labels().iter().map(|&l| l as u8).collect()
    } else {
        enc.set_color(ColorType::Grayscale);
        enc.set_depth(BitDepth::Sixteen);
        labels.labels().iter().flat_map(|&l| (l as u16).to_be_bytes()).collect()
    };
    let png_err = |e: png::EncodingError| Error::decode(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Reads raw label ids from an indexed or grayscale PNG (palette indices are
/// returned as-is, never expanded to colours).
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::decode(path, e.to_string()))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::decode(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::decode(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = info.bit_depth as usize;
    let channels = match info.color_type {
        ColorType::Grayscale | ColorType::Indexed => 1,
        ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::decode(path, format!("unsupported label colour type {other:?}"))),
    };
    let mut labels = Vec::with_capacity(h * w);
    for row in buf.chunks(info.line_size).take(h) {
        for x in 0..w {
            let v = match bits {
                16 => {
                    let o = x * channels * 2;
                    u16::from_be_bytes([row[o], row[o + 1]]) as u32
                }
                8 => row[x * channels] as u32,
                1 | 2 | 4 => {
                    let bit = x * bits;
                    let byte = row[bit / 8];
                    let shift = 8 - bits - (bit % 8);
                    ((byte >> shift) & ((1u8 << bits) - 1)) as u32
                }
                _ => return Err(Error::decode(path, format!("unsupported bit depth {bits}"))),
            };
            labels.push(v);
        }
    }
    LabelMap::from_vec(h, w, labels)
}

/// Palette colours blended over the image (`alpha` is the label weight).
pub fn overlay(image: &ImageTensor, labels: &LabelMap, alpha: f32) -> Result<RgbImage> {
    if (image.height(), image.width()) != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, labels are {:?}",
            image.height(),
            image.width(),
            labels.dims()
        )));
    }
    let base = image.to_rgb8();
    let a = alpha.clamp(0.0, 1.0);
    Ok(RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let c = label_color(labels.labels()[[y as usize, x as usize]]);
        let p = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|k| (a * c[k] as f32 + (1.0 - a) * p[k] as f32).round() as u8))
    }))
}

/// Flat palette rendering of a label map.
pub fn colorize(labels: &LabelMap) -> RgbImage {
    let (h, w) = labels.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(label_color(labels.labels()[[y as usize, x as usize]])))
}

/// Loads an RGB image file into `[0, 1]` floats.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::decode(path, e.to_string()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageTensor::from_rgb8(&img.to_rgb8(), id)
}
