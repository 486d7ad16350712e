//! Interpretability scoring: how stable the attention map stays when an input
//! modification leaves the prediction unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pnm, ImageDataset, Modification};
use crate::error::{AibError, Result};
use crate::model::AibModel;
use crate::tensor::Tensor;

/// Cosine similarity of two flattened maps.
///
/// Each map is scaled to unit Euclidean norm and the dot product returned,
/// clamped to `[-1, 1]`. Bit-identical maps give exactly 1. An all-zero map
/// has no direction and is a domain error.
pub fn attention_cosine(a1: &[f64], a2: &[f64]) -> Result<f64> {
    if a1.len() != a2.len() {
        return Err(AibError::Dimension(format!(
            "attention maps have {} and {} cells",
            a1.len(),
            a2.len()
        )));
    }
    let n1 = a1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = a2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(AibError::Domain("cosine of an all-zero attention map".into()));
    }
    if a1 == a2 {
        return Ok(1.0);
    }
    let dot: f64 = a1.iter().zip(a2).map(|(x, y)| (x / n1) * (y / n2)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Outcome for one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub label: usize,
    pub pred_original: usize,
    pub pred_modified: usize,
    /// `None` when either map is all zero; such samples are excluded.
    pub cosine: Option<f64>,
}

impl SampleOutcome {
    pub fn prediction_consistent(&self) -> bool {
        self.pred_original == self.pred_modified
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Counts of `values` in `bins` equal-width bins over `[-1, 1]`; 1 falls in the last bin.
pub fn cosine_histogram(values: impl IntoIterator<Item = f64>, bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: -1.0 + i as f64 * width,
            hi: -1.0 + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let i = (((v + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpReport {
    pub modification: Modification,
    pub tau: f64,
    /// Samples with a defined cosine.
    pub n_total: usize,
    /// Of those, samples whose prediction survived the modification.
    pub n_pred_consistent: usize,
    /// Of those, samples whose attention cosine reached `tau`.
    pub n_att_consistent: usize,
    /// `n_att_consistent / n_pred_consistent`; `None` when nothing stayed consistent.
    pub score: Option<f64>,
    /// Samples dropped for an all-zero map.
    pub n_excluded: usize,
    /// Cosines of prediction-consistent samples.
    pub histogram: Vec<HistogramBin>,
    pub samples: Vec<SampleOutcome>,
}

impl InterpReport {
    pub fn from_samples(modification: Modification, tau: f64, samples: Vec<SampleOutcome>) -> Self {
        let valid: Vec<&SampleOutcome> = samples.iter().filter(|s| s.cosine.is_some()).collect();
        let consistent: Vec<f64> = valid
            .iter()
            .filter(|s| s.prediction_consistent())
            .filter_map(|s| s.cosine)
            .collect();
        let n_att = consistent.iter().filter(|&&c| c >= tau).count();
        InterpReport {
            modification,
            tau,
            n_total: valid.len(),
            n_pred_consistent: consistent.len(),
            n_att_consistent: n_att,
            score: (!consistent.is_empty()).then(|| n_att as f64 / consistent.len() as f64),
            n_excluded: samples.len() - valid.len(),
            histogram: cosine_histogram(consistent.iter().copied(), HISTOGRAM_BINS),
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// One row per sample.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,label,pred_original,pred_modified,prediction_consistent,cosine\n");
        for s in &self.samples {
            let cos = s.cosine.map(|c| format!("{c:.10}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.index,
                s.label,
                s.pred_original,
                s.pred_modified,
                s.prediction_consistent(),
                cos
            )
            .expect("string write");
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for b in &self.histogram {
            writeln!(out, "{:.2},{:.2},{}", b.lo, b.hi, b.count).expect("string write");
        }
        out
    }
}

/// Mean-mode predictions and attention means for every image of `ds`, given
/// raw `[0, 1]` images (standardized with the dataset's statistics).
fn infer_all(model: &AibModel, ds: &ImageDataset, raw: &Tensor, batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = raw.shape()[0];
    let mut preds = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = raw.gather_rows(chunk)?;
        let inf = model.infer(&ds.standardize(&batch))?;
        preds.extend(inf.predictions());
        let cells = inf.attention_mean.numel() / chunk.len();
        maps.extend(inf.attention_mean.data().chunks(cells).map(<[f64]>::to_vec));
    }
    Ok((preds, maps))
}

/// Scores `model` on `ds` under `modification` with threshold `tau`.
///
/// Predictions and attention maps come from mean-mode inference, so the score
/// depends only on the parameters and the modification seed.
pub fn interpretability_score(
    model: &AibModel,
    ds: &ImageDataset,
    modification: &Modification,
    tau: f64,
    patches: Option<&ImageDataset>,
    batch_size: usize,
) -> Result<InterpReport> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(AibError::Config(format!("tau={tau} must lie in [-1, 1]")));
    }
    if ds.is_empty() {
        return Err(AibError::Config("interpretability set is empty".into()));
    }
    let raw = ds.images();
    let modified = modification.apply(raw, patches)?;
    let (p0, m0) = infer_all(model, ds, raw, batch_size)?;
    let (p1, m1) = infer_all(model, ds, &modified, batch_size)?;
    let samples = (0..ds.len())
        .map(|i| SampleOutcome {
            index: i,
            label: ds.labels()[i],
            pred_original: p0[i],
            pred_modified: p1[i],
            cosine: attention_cosine(&m0[i], &m1[i]).ok(),
        })
        .collect();
    Ok(InterpReport::from_samples(*modification, tau, samples))
}

/// Writes, per sample, the input image (PPM) and its mean attention map (PGM,
/// min-max scaled), plus an `index.csv` listing files, labels and predictions.
pub fn export_attention(model: &AibModel, ds: &ImageDataset, out_dir: &Path, limit: Option<usize>) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| AibError::io(out_dir, e))?;
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    let [c, h, w] = ds.image_shape();
    let mut index = String::from("index,label,prediction,input,attention\n");
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(64) {
        let (raw, labels) = ds.batch(chunk)?;
        let inf = model.infer(&ds.standardize(&raw))?;
        let preds = inf.predictions();
        let s = inf.attention_mean.shape();
        let (ah, aw) = (s[2], s[3]);
        for (k, &i) in chunk.iter().enumerate() {
            let input_name = format!("{i:05}_input.ppm");
            let att_name = format!("{i:05}_attention.pgm");
            let img = &raw.data()[k * c * h * w..(k + 1) * c * h * w];
            let rgb = if c == 3 { img.to_vec() } else { img[..h * w].repeat(3) };
            pnm::write_image(&out_dir.join(&input_name), &rgb, 3, h, w)?;
            let map = &inf.attention_mean.data()[k * ah * aw..(k + 1) * ah * aw];
            pnm::write_pgm(&out_dir.join(&att_name), aw, ah, &pnm::min_max_bytes(map))?;
            writeln!(index, "{i},{},{},{input_name},{att_name}", labels[k], preds[k]).expect("string write");
        }
    }
    let path = out_dir.join("index.csv");
    std::fs::write(&path, index).map_err(|e| AibError::io(&path, e))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{ConvBlock, ModelConfig};

    #[test]
    fn cosine_spot_values() {
        assert_eq!(attention_cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((attention_cosine(&[1.0, 2.0, 3.0], &[2.5, 5.0, 7.5]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(attention_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((attention_cosine(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(attention_cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(AibError::Domain(_))));
        assert!(attention_cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = cosine_histogram([-1.0, 0.0, 0.95, 1.0], 20);
        assert_eq!(h.len(), 20);
        assert_eq!(h[0].count, 1);
        assert_eq!(h[10].count, 1);
        assert_eq!(h[19].count, 2);
    }

    #[test]
    fn report_counts_and_exclusion() {
        let s = |pred_modified, cosine| SampleOutcome {
            index: 0,
            label: 0,
            pred_original: 0,
            pred_modified,
            cosine,
        };
        let r = InterpReport::from_samples(
            Modification::none(),
            0.8,
            vec![s(0, Some(0.9)), s(0, Some(0.5)), s(1, Some(0.99)), s(0, None)],
        );
        assert_eq!(r.n_total, 3);
        assert_eq!(r.n_pred_consistent, 2);
        assert_eq!(r.n_att_consistent, 1);
        assert_eq!(r.score, Some(0.5));
        assert_eq!(r.n_excluded, 1);
        let none = InterpReport::from_samples(Modification::none(), 0.8, vec![s(1, Some(1.0))]);
        assert_eq!(none.score, None);
        assert_eq!(r.samples_csv().lines().count(), 5);
    }

    fn tiny() -> (AibModel, ImageDataset) {
        let mut c = ModelConfig::new(2, [1, 8, 8]);
        c.backbone = vec![ConvBlock { channels: 3, pool: true }];
        c.latent_dim = 4;
        c.anchors = 5;
        let model = AibModel::new(c, 2).unwrap();
        let images = Tensor::from_fn([6, 1, 8, 8], |i| ((i * 37) % 17) as f64 / 17.0);
        let ds = ImageDataset::new(images, vec![0, 1, 0, 1, 0, 1], 2, Split::Test).unwrap();
        (model, ds)
    }

    #[test]
    fn unmodified_inputs_score_one() {
        let (model, ds) = tiny();
        let r = interpretability_score(&model, &ds, &Modification::none(), 1.0, None, 4).unwrap();
        assert_eq!(r.n_pred_consistent, 6);
        assert_eq!(r.score, Some(1.0));
    }

    #[test]
    fn export_writes_pairs_and_index() {
        let (model, ds) = tiny();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(export_attention(&model, &ds, dir.path(), Some(3)).unwrap(), 3);
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert_eq!(index.lines().count(), 4);
        let att = std::fs::read(dir.path().join("00002_attention.pgm")).unwrap();
        assert!(att.starts_with(b"P5\n4 4\n255\n"));
        let input = std::fs::read(dir.path().join("00000_input.ppm")).unwrap();
        assert!(input.starts_with(b"P6\n8 8\n255\n"));
    }
}
