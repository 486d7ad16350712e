//! Binary PGM (P5) and PPM (P6) writers, maxval 255.

use std::fs;
use std::path::Path;

use super::dataset::unit_to_byte;
use crate::error::{AibError, Result};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `rgb` is interleaved `R G B` per pixel.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Min-max scales `values` to `[0, 255]`; a constant map becomes mid gray (128).
pub fn min_max_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Writes a planar `[C, H, W]` raw `[0, 1]` image as PGM (C = 1) or PPM (C = 3).
pub fn write_image(path: &Path, planar: &[f64], channels: usize, height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    let bytes = match channels {
        1 => encode_pgm(width, height, &planar.iter().map(|&v| unit_to_byte(v)).collect::<Vec<_>>()),
        3 => {
            let mut rgb = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    rgb.push(unit_to_byte(planar[c * plane + p]));
                }
            }
            encode_ppm(width, height, &rgb)
        }
        _ => return Err(AibError::Dimension(format!("cannot render {channels}-channel image"))),
    };
    fs::write(path, bytes).map_err(|e| AibError::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| AibError::io(path, e))
}
