//! Random horizontal flips and pad-and-crop shifts.

use rand::Rng;

use crate::tensor::Tensor;

pub const CROP_PADDING: usize = 4;

/// Mirrors every row of a `[C, H, W]` image in place.
pub fn flip_horizontal(image: &mut [f64], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}

/// Zero-pads by `pad` on all sides and crops the original size back out at
/// offset `(dy, dx)` into the padded image.
pub fn pad_crop(image: &[f64], channels: usize, height: usize, width: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * height * width];
    for c in 0..channels {
        for y in 0..height {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..width {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < width as isize {
                    out[(c * height + y) * width + x] = image[(c * height + sy as usize) * width + sx as usize];
                }
            }
        }
    }
    out
}

/// Per image: flip with probability 0.5, then a 4-pixel pad-and-crop at a
/// uniformly random offset.
pub fn augment(batch: &Tensor, rng: &mut impl Rng) -> Tensor {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let size = c * h * w;
    let mut data = Vec::with_capacity(batch.numel());
    for image in batch.data().chunks(size) {
        let mut img = image.to_vec();
        if rng.random_bool(0.5) {
            flip_horizontal(&mut img, w);
        }
        let dy = rng.random_range(0..=2 * CROP_PADDING);
        let dx = rng.random_range(0..=2 * CROP_PADDING);
        data.extend(pad_crop(&img, c, h, w, CROP_PADDING, dy, dx));
    }
    Tensor::new(s, data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseSource, StreamId};

    #[test]
    fn flip_is_an_involution() {
        let orig: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let mut img = orig.clone();
        flip_horizontal(&mut img, 4);
        assert_ne!(img, orig);
        flip_horizontal(&mut img, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn centered_crop_is_identity() {
        let img: Vec<f64> = (0..3 * 5 * 6).map(|v| v as f64).collect();
        assert_eq!(pad_crop(&img, 3, 5, 6, 4, 4, 4), img);
        let shifted = pad_crop(&img, 3, 5, 6, 4, 5, 4);
        assert_eq!(shifted[0], img[6]);
        assert_eq!(shifted[4 * 6], 0.0);
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let batch = Tensor::from_fn([4, 1, 8, 8], |i| i as f64);
        let src = NoiseSource::new(12);
        let a = augment(&batch, src.stream(StreamId::Augment).rng());
        let b = augment(&batch, src.stream(StreamId::Augment).rng());
        assert_eq!(a, b);
    }
}
