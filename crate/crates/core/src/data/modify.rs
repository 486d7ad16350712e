//! Spatial occlusion and frequency-band filtering of raw `[0, 1]` images.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ImageDataset;
use super::dft::{dft2, idft2};
use crate::error::{AibError, Result};
use crate::noise::{NoiseSource, StreamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModificationKind {
    None,
    OccludeColor,
    OccludePatch,
    FreqHigh,
    FreqLow,
}

impl ModificationKind {
    pub fn name(self) -> &'static str {
        match self {
            ModificationKind::None => "none",
            ModificationKind::OccludeColor => "occlude-color",
            ModificationKind::OccludePatch => "occlude-patch",
            ModificationKind::FreqHigh => "freq-high",
            ModificationKind::FreqLow => "freq-low",
        }
    }
}

impl fmt::Display for ModificationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModificationKind {
    type Err = AibError;

    fn from_str(s: &str) -> Result<Self> {
        [
            ModificationKind::None,
            ModificationKind::OccludeColor,
            ModificationKind::OccludePatch,
            ModificationKind::FreqHigh,
            ModificationKind::FreqLow,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| AibError::Config(format!("unknown modification kind `{s}`")))
    }
}

/// A reproducible input modification.
///
/// `p` is the occlusion window side; `r` is the frequency radius, a lower
/// cutoff for `freq-high` (keep `r > r0`) and an upper one for `freq-low`
/// (keep `r <= r0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modification {
    pub kind: ModificationKind,
    pub p: usize,
    pub r: f64,
    pub seed: u64,
}

impl Modification {
    pub fn none() -> Self {
        Modification {
            kind: ModificationKind::None,
            p: 0,
            r: 0.0,
            seed: 0,
        }
    }

    pub fn occlude_color(p: usize, seed: u64) -> Self {
        Modification {
            kind: ModificationKind::OccludeColor,
            p,
            r: 0.0,
            seed,
        }
    }

    pub fn freq(keep: FreqKeep, r: f64) -> Self {
        Modification {
            kind: match keep {
                FreqKeep::High => ModificationKind::FreqHigh,
                FreqKeep::Low => ModificationKind::FreqLow,
            },
            p: 0,
            r,
            seed: 0,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match self.kind {
            ModificationKind::None => Ok(()),
            ModificationKind::OccludeColor | ModificationKind::OccludePatch => {
                if self.p == 0 || self.p > height.min(width) {
                    Err(AibError::Config(format!(
                        "occlusion window p={} must lie in [1, {}]",
                        self.p,
                        height.min(width)
                    )))
                } else {
                    Ok(())
                }
            }
            ModificationKind::FreqHigh | ModificationKind::FreqLow => {
                if self.r > 0.0 && self.r.is_finite() {
                    Ok(())
                } else {
                    Err(AibError::Config(format!("frequency radius r={} must be positive", self.r)))
                }
            }
        }
    }

    /// Applies the modification to a raw `[N, C, H, W]` batch.
    pub fn apply(&self, raw: &Tensor, patches: Option<&ImageDataset>) -> Result<Tensor> {
        let s = raw.shape();
        self.validate(s[2], s[3])?;
        let mut stream = NoiseSource::new(self.seed).stream(StreamId::Modification);
        match self.kind {
            ModificationKind::None => Ok(raw.clone()),
            ModificationKind::OccludeColor => occlude(raw, self.p, OcclusionSource::Color, stream.rng()),
            ModificationKind::OccludePatch => {
                let ds = patches.ok_or_else(|| {
                    AibError::Config("occlude-patch needs a patch dataset".into())
                })?;
                occlude(raw, self.p, OcclusionSource::Patches(ds), stream.rng())
            }
            ModificationKind::FreqHigh => Ok(freq_filter(raw, FreqKeep::High, self.r)),
            ModificationKind::FreqLow => Ok(freq_filter(raw, FreqKeep::Low, self.r)),
        }
    }
}

/// What fills an occluded window.
#[derive(Clone, Copy, Debug)]
pub enum OcclusionSource<'a> {
    /// One uniformly random color per image.
    Color,
    /// A random `p x p` crop of a random image of another dataset.
    Patches(&'a ImageDataset),
}

/// Replaces one `p x p` window per image at a uniformly random position.
pub fn occlude(raw: &Tensor, p: usize, source: OcclusionSource<'_>, rng: &mut impl Rng) -> Result<Tensor> {
    let s = raw.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || p > h.min(w) {
        return Err(AibError::Config(format!("occlusion window p={p} must lie in [1, {}]", h.min(w))));
    }
    if let OcclusionSource::Patches(ds) = source {
        let [pc, ph, pw] = ds.image_shape();
        if (pc != c && pc != 1) || ph < p || pw < p {
            return Err(AibError::Config(format!(
                "patch images {:?} cannot fill a {p}x{p} window of {c}-channel images",
                ds.image_shape()
            )));
        }
    }
    let mut out = raw.clone();
    let data = out.data_mut();
    for img in 0..n {
        let y0 = rng.random_range(0..=h - p);
        let x0 = rng.random_range(0..=w - p);
        let fill: Box<dyn Fn(usize, usize, usize) -> f64> = match source {
            OcclusionSource::Color => {
                let color: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
                Box::new(move |ch, _, _| color[ch])
            }
            OcclusionSource::Patches(ds) => {
                let [pc, ph, pw] = ds.image_shape();
                let idx = rng.random_range(0..ds.len());
                let sy = rng.random_range(0..=ph - p);
                let sx = rng.random_range(0..=pw - p);
                let base = idx * pc * ph * pw;
                let src = ds.images().data();
                Box::new(move |ch, dy, dx| {
                    let sc = if pc == 1 { 0 } else { ch };
                    src[base + (sc * ph + sy + dy) * pw + sx + dx]
                })
            }
        };
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    data[((img * c + ch) * h + y0 + dy) * w + x0 + dx] = fill(ch, dy, dx);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqKeep {
    /// Keep bins with radius `> r0`.
    High,
    /// Keep bins with radius `<= r0`.
    Low,
}

/// Per channel: transform, zero the discarded band, invert, keep the real part.
/// No clamping.
pub fn freq_filter_unclamped(raw: &Tensor, keep: FreqKeep, r0: f64) -> Tensor {
    let s = raw.shape();
    let (h, w) = (s[2], s[3]);
    let mut data = Vec::with_capacity(raw.numel());
    for channel in raw.data().chunks(h * w) {
        let mut spectrum = dft2(channel, h, w);
        for row in 0..h {
            for col in 0..w {
                let r = spectrum.radius(row, col);
                let kept = match keep {
                    FreqKeep::High => r > r0,
                    FreqKeep::Low => r <= r0,
                };
                if !kept {
                    spectrum.bins[row * w + col] = Default::default();
                }
            }
        }
        data.extend(idft2(&spectrum).into_iter().map(|c| c.re));
    }
    Tensor::new(s, data).expect("same shape")
}

/// [`freq_filter_unclamped`] followed by clamping to `[0, 1]`.
pub fn freq_filter(raw: &Tensor, keep: FreqKeep, r0: f64) -> Tensor {
    freq_filter_unclamped(raw, keep, r0).map(|v| v.clamp(0.0, 1.0))
}
