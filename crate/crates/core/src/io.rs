//! File formats: PFM float maps, 8-bit RGB / mask PNGs and 16-bit instance PNGs.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Write a single-channel little-endian PFM (scale `-1.0`, bottom row first).
pub fn write_pfm(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for {height}x{width} PFM",
            data.len()
        )));
    }
    let mut buf = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    buf.reserve(data.len() * 4);
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let line = |r: &mut BufReader<fs::File>| -> Result<String> {
        let mut s = String::new();
        r.read_line(&mut s).map_err(|e| Error::io(path, e))?;
        Ok(s.trim().to_string())
    };
    if line(&mut r)? != "Pf" {
        return Err(Error::format(path, "expected single-channel 'Pf' header"));
    }
    let dims = line(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height))) = (it.next(), it.next()) else {
        return Err(Error::format(path, format!("bad PFM dimensions '{dims}'")));
    };
    let scale: f64 = line(&mut r)?
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != height * width * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of samples, found {}",
                height * width * 4,
                raw.len()
            ),
        ));
    }
    let decode = |b: &[u8]| {
        let b = [b[0], b[1], b[2], b[3]];
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let mut data = vec![0f32; height * width];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = decode(chunk);
    }
    Ok((height, width, data))
}

/// Channel-first `[3, H, W]` bytes to an RGB PNG.
pub fn write_rgb_png(path: &Path, height: usize, width: usize, chw: &[u8]) -> Result<()> {
    let p = height * width;
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        Rgb([chw[i], chw[p + i], chw[2 * p + i]])
    });
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let p = h * w;
    let mut chw = vec![0u8; 3 * p];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            chw[c * p + i] = px.0[c];
        }
    }
    Ok((h, w, chw))
}

pub fn write_u16_png(path: &Path, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Shape("16-bit PNG size".into()))?;
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_u16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::format(
                path,
                format!("expected a 16-bit grayscale PNG, found {:?}", other.color()),
            ));
        }
    };
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Boolean mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask_png(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(
        width as u32,
        height as u32,
        mask.iter()
            .map(|&m| if m { 255u8 } else { 0 })
            .collect::<Vec<u8>>(),
    )
    .ok_or_else(|| Error::Shape("mask PNG size".into()))?;
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::format(path, e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
