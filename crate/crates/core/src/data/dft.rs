//! Exact 2-D discrete Fourier transform with a centered spectrum.
//!
//! The transform is computed separably (rows, then columns) with cached
//! twiddle factors: O(HW(H+W)). The spectrum is stored shifted so the DC bin
//! sits at `(H/2, W/2)` (integer division), matching the usual `fftshift`.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Centered spectrum of one `height x width` channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Euclidean distance of bin `(row, col)` from the center.
    pub fn radius(&self, row: usize, col: usize) -> f64 {
        let (cy, cx) = self.center();
        let dy = row as f64 - cy as f64;
        let dx = col as f64 - cx as f64;
        (dy * dy + dx * dx).sqrt()
    }

    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// 1-D DFT along `count` lines of length `n` with the given element stride.
fn transform_lines(data: &mut [Complex64], n: usize, count: usize, line_step: usize, elem_step: usize, tw: &[Complex64]) {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for line in 0..count {
        let base = line * line_step;
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..n {
                acc += data[base + j * elem_step] * tw[(k * j) % n];
            }
            *out = acc;
        }
        for (j, v) in buf.iter().enumerate() {
            data[base + j * elem_step] = *v;
        }
    }
}

fn transform(data: &mut [Complex64], height: usize, width: usize, sign: f64) {
    transform_lines(data, width, height, width, 1, &twiddles(width, sign));
    transform_lines(data, height, width, 1, width, &twiddles(height, sign));
}

/// Forward transform of a row-major channel, returned centered.
pub fn dft2(channel: &[f64], height: usize, width: usize) -> Spectrum {
    assert_eq!(channel.len(), height * width, "dft2: channel size");
    let mut data: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, height, width, -1.0);
    let (cy, cx) = (height / 2, width / 2);
    let mut bins = vec![Complex64::new(0.0, 0.0); height * width];
    for u in 0..height {
        for v in 0..width {
            bins[((u + cy) % height) * width + (v + cx) % width] = data[u * width + v];
        }
    }
    Spectrum { height, width, bins }
}

/// Inverse of [`dft2`]; returns complex spatial values.
pub fn idft2(spectrum: &Spectrum) -> Vec<Complex64> {
    let (h, w) = (spectrum.height, spectrum.width);
    let (cy, cx) = spectrum.center();
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            data[u * w + v] = spectrum.bins[((u + cy) % h) * w + (v + cx) % w];
        }
    }
    transform(&mut data, h, w, 1.0);
    let scale = 1.0 / (h * w) as f64;
    for c in &mut data {
        *c *= scale;
    }
    data
}
