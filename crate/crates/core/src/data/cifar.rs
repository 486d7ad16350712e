//! CIFAR-10 binary batches: per record one label byte then 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue, row-major 32x32).

use std::fs;
use std::path::Path;

use super::dataset::{byte_to_unit, unit_to_byte, ImageDataset, Split};
use crate::error::{AibError, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.is_empty() {
        return Err(AibError::format(path, 0, "empty CIFAR-10 batch"));
    }
    if !bytes.len().is_multiple_of(RECORD) {
        let complete = bytes.len() / RECORD * RECORD;
        return Err(AibError::format(
            path,
            complete as u64,
            format!("truncated record ({} trailing bytes)", bytes.len() - complete),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / RECORD * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(AibError::format(path, (i * RECORD) as u64, format!("label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| byte_to_unit(b)));
    }
    Ok((labels, pixels))
}

pub fn load_cifar10_batch(path: &Path, split: Split) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(|e| AibError::io(path, e))?;
    let (labels, pixels) = parse_cifar10(&bytes, path)?;
    let images = Tensor::new([labels.len(), 3, SIDE, SIDE], pixels)?;
    ImageDataset::new(images, labels, 10, split)
}

/// Loads every `data_batch_{1..5}.bin` present plus `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(ImageDataset, ImageDataset)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        if !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| AibError::io(&path, e))?;
        let (l, p) = parse_cifar10(&bytes, &path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    if labels.is_empty() {
        let path = dir.join("data_batch_1.bin");
        return Err(AibError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 training batches"),
        ));
    }
    let images = Tensor::new([labels.len(), 3, SIDE, SIDE], pixels)?;
    let train = ImageDataset::new(images, labels, 10, Split::Train)?;
    let test = load_cifar10_batch(&dir.join("test_batch.bin"), Split::Test)?
        .with_normalization(train.normalization().clone());
    Ok((train, test))
}

pub fn encode_cifar10(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, SIDE, SIDE] {
        return Err(AibError::Dimension(format!(
            "CIFAR-10 records hold 3x32x32 images, got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD);
    for (i, &label) in ds.labels().iter().enumerate() {
        out.push(label as u8);
        out.extend(ds.images().data()[i * PIXELS..(i + 1) * PIXELS].iter().map(|&v| unit_to_byte(v)));
    }
    Ok(out)
}

pub fn write_cifar10_batch(path: &Path, ds: &ImageDataset) -> Result<()> {
    let bytes = encode_cifar10(ds)?;
    fs::write(path, bytes).map_err(|e| AibError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_batch_names_offset() {
        let bytes = vec![1u8; RECORD * 2 + 10];
        let err = parse_cifar10(&bytes, Path::new("b")).unwrap_err();
        assert!(matches!(err, AibError::Format { offset, .. } if offset == (RECORD * 2) as u64));
    }

    #[test]
    fn planes_are_r_then_g_then_b() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 2048));
        let (labels, pixels) = parse_cifar10(&rec, Path::new("b")).unwrap();
        assert_eq!(labels, vec![3]);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels[1023], 1.0);
        assert_eq!(pixels[1024], 0.0);
    }
}
