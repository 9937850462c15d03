//! PNG, PGM and PFM load/store.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{BitMask, Image, Raster};
use crate::error::{Error, Result};

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Loads a PNG, PGM/PPM or PFM file as a normalized image.
pub fn load_image(path: &Path) -> Result<Image> {
    if extension(path) == "pfm" {
        return Ok(Image::from_raster(read_pfm(path)?));
    }
    let dynimg = image::open(path)?;
    Ok(from_dynamic(dynimg))
}

fn from_dynamic(dynimg: DynamicImage) -> Image {
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let gray = matches!(
        dynimg,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let buf = dynimg.into_luma16();
        let data = buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Image::from_raster(Raster::new(w, h, 1, data).expect("decoded buffer size"))
    } else {
        let buf = dynimg.into_rgb16();
        let data = buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Image::from_raster(Raster::new(w, h, 3, data).expect("decoded buffer size"))
    }
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stores an image as 8-bit PNG or PGM (by extension) or as float PFM.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "pfm" => write_pfm(img.as_raster(), path),
        "png" | "pgm" | "ppm" => {
            let (w, h) = (img.width() as u32, img.height() as u32);
            let bytes: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
            match img.channels() {
                1 => {
                    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                        .ok_or_else(|| Error::Codec("buffer size".into()))?;
                    buf.save(path)?;
                }
                _ => {
                    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                        .ok_or_else(|| Error::Codec("buffer size".into()))?;
                    buf.save(path)?;
                }
            }
            Ok(())
        }
        other => Err(Error::Codec(format!(
            "unsupported image extension '{other}'"
        ))),
    }
}

/// Stores a mask as an 8-bit PNG (0 / 255).
pub fn save_mask(mask: &BitMask, path: &Path) -> Result<()> {
    save_image(&Image::from_raster(mask.to_raster()), path)
}

fn next_token(reader: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|e| Error::Parse(e.to_string()))
}

/// Reads a PFM file (`Pf` grayscale or `PF` color), honoring the endianness sign.
pub fn read_pfm(path: &Path) -> Result<Raster> {
    let mut reader = BufReader::new(File::open(path)?);
    let magic = next_token(&mut reader)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::Parse(format!("bad PFM magic '{m}'"))),
    };
    let parse = |s: String| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Parse(format!("PFM header '{s}': {e}")))
    };
    let w = parse(next_token(&mut reader)?)? as usize;
    let h = parse(next_token(&mut reader)?)? as usize;
    let scale = parse(next_token(&mut reader)?)?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut raw)?;
    let floats: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        })
        .collect();
    // PFM stores rows bottom-to-top.
    let row = w * channels;
    let mut data = Vec::with_capacity(floats.len());
    for y in (0..h).rev() {
        data.extend_from_slice(&floats[y * row..(y + 1) * row]);
    }
    Raster::new(w, h, channels, data)
}

/// Writes a 1- or 3-channel raster as little-endian PFM. Two-channel rasters
/// are padded with a zero third channel.
pub fn write_pfm(r: &Raster, path: &Path) -> Result<()> {
    let (w, h) = r.dims();
    let out_ch = if r.channels() == 1 { 1 } else { 3 };
    let mut f = BufWriter::new(File::create(path)?);
    write!(
        f,
        "{}\n{} {}\n-1.0\n",
        if out_ch == 1 { "Pf" } else { "PF" },
        w,
        h
    )?;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..out_ch {
                let v = if c < r.channels() {
                    r.get(x, y, c)
                } else {
                    0.0
                };
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}
