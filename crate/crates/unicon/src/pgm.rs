//! Binary greyscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use unicon_core::data::Image;

/// Encodes `[0, 1]` pixels, clamping and rounding to the nearest level.
pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    ensure!(start < *pos, "PGM header ends early");
    Ok(std::str::from_utf8(&bytes[start..*pos])?)
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    ensure!(token(bytes, &mut pos)? == "P5", "not a binary PGM");
    let width: usize = token(bytes, &mut pos)?.parse().context("PGM width")?;
    let height: usize = token(bytes, &mut pos)?.parse().context("PGM height")?;
    let maxval: usize = token(bytes, &mut pos)?.parse().context("PGM maxval")?;
    if maxval != 255 {
        bail!("only maxval 255 is supported, got {maxval}");
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    ensure!(bytes.len() >= pos + n, "PGM raster holds {} of {n} bytes", bytes.len().saturating_sub(pos));
    let pixels = bytes[pos..pos + n].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::new(width, height, pixels)?)
}

pub fn write(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}
