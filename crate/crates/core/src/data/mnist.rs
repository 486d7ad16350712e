//! MNIST IDX files (plain or gzip-compressed).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::dataset::{byte_to_unit, unit_to_byte, ImageDataset, Split};
use crate::error::{AibError, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| AibError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| AibError::format(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// `name` itself, or `name.gz` when only the compressed file exists.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(AibError::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| AibError::format(path, offset as u64, "truncated header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(AibError::format(path, 0, format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(AibError::format(
            path,
            bytes.len() as u64,
            format!("truncated: {need} bytes expected for {n} images of {rows}x{cols}"),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(AibError::format(path, 0, format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(AibError::format(
            path,
            bytes.len() as u64,
            format!("truncated: {} bytes expected for {n} labels", 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<ImageDataset> {
    let img_path = locate(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(AibError::format(
            &lbl_path,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().position(|&l| l > 9) {
        return Err(AibError::format(&lbl_path, 8 + bad as u64, format!("label {} > 9", labels[bad])));
    }
    let images = Tensor::new([n, 1, rows, cols], pixels.into_iter().map(byte_to_unit).collect())?;
    ImageDataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir`; the test split takes the
/// training normalization.
pub fn load_mnist(dir: &Path) -> Result<(ImageDataset, ImageDataset)> {
    let train = load_split(dir, "train", Split::Train)?;
    let test = load_split(dir, "t10k", Split::Test)?.with_normalization(train.normalization().clone());
    Ok((train, test))
}

pub fn encode_idx(ds: &ImageDataset) -> (Vec<u8>, Vec<u8>) {
    let [c, h, w] = ds.image_shape();
    assert_eq!(c, 1, "IDX images are single-channel");
    let mut images = Vec::with_capacity(16 + ds.images().numel());
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for v in [ds.len(), h, w] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    images.extend(ds.images().data().iter().map(|&v| unit_to_byte(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    (images, labels)
}

/// Writes `{prefix}-images-idx3-ubyte[.gz]` and `{prefix}-labels-idx1-ubyte[.gz]`.
pub fn write_mnist(dir: &Path, prefix: &str, ds: &ImageDataset, gzip: bool) -> Result<()> {
    if ds.image_shape()[0] != 1 {
        return Err(AibError::Dimension("MNIST IDX holds single-channel images".into()));
    }
    let (images, labels) = encode_idx(ds);
    for (name, bytes) in [
        (format!("{prefix}-images-idx3-ubyte"), images),
        (format!("{prefix}-labels-idx1-ubyte"), labels),
    ] {
        let (path, payload) = if gzip {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes).expect("in-memory write");
            (dir.join(format!("{name}.gz")), enc.finish().expect("in-memory write"))
        } else {
            (dir.join(name), bytes)
        };
        fs::write(&path, payload).map_err(|e| AibError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x");
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0u8; 7]);
        let err = parse_idx_images(&bytes, p).unwrap_err();
        assert!(matches!(err, AibError::Format { offset: 23, .. }));
        bytes[3] = 1;
        let err = parse_idx_images(&bytes, p).unwrap_err();
        assert!(matches!(err, AibError::Format { offset: 0, .. }));
        assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 5, 1], p).is_err());
    }
}
