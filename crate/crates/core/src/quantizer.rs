//! Nearest-anchor quantization of attention scores.
//!
//! Every cell of a continuous attention map snaps to the closest of `Q`
//! learnable scalar anchors. The forward value is exactly the anchor; the
//! backward pass treats the lookup as identity (straight-through). Two loss
//! terms route learning signal with stop-gradients: the quantization term
//! moves anchors toward the scores assigned to them, and the commitment term
//! pulls scores toward their anchors.

use crate::error::{AibError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The `Q` learnable anchor values.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    values: Vec<f64>,
}

impl AnchorSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AibError::Config("anchor set must not be empty".into()));
        }
        Ok(AnchorSet { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.values.len()], self.values.clone()).expect("non-empty anchors")
    }

    /// Index of the closest anchor; the lowest index wins ties.
    pub fn nearest(&self, score: f64) -> usize {
        let mut best = 0;
        let mut best_dist = (score - self.values[0]).abs();
        for (j, v) in self.values.iter().enumerate().skip(1) {
            let dist = (score - v).abs();
            if dist < best_dist {
                best = j;
                best_dist = dist;
            }
        }
        best
    }
}

/// Anchors evenly dividing `[0, 1]`; a single anchor sits at 0.5.
pub fn init_anchors(q: usize) -> Result<AnchorSet> {
    match q {
        0 => Err(AibError::Config("anchor count must be at least 1".into())),
        1 => AnchorSet::new(vec![0.5]),
        _ => AnchorSet::new((0..q).map(|i| i as f64 / (q - 1) as f64).collect()),
    }
}

/// A continuous map, its quantized counterpart, and the anchor index per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub continuous: Tensor,
    pub quantized: Tensor,
    pub assignment: Vec<usize>,
}

pub fn quantize(a: &Tensor, anchors: &AnchorSet) -> Result<AttentionMaps> {
    if anchors.is_empty() {
        return Err(AibError::Config("cannot quantize against an empty anchor set".into()));
    }
    let assignment: Vec<usize> = a.data().iter().map(|&s| anchors.nearest(s)).collect();
    let quantized = Tensor::new(
        a.shape(),
        assignment.iter().map(|&k| anchors.values()[k]).collect(),
    )?;
    Ok(AttentionMaps {
        continuous: a.clone(),
        quantized,
        assignment,
    })
}

/// Forward value `maps.quantized`, identity gradient into `a`.
pub fn straight_through(tape: &mut Tape, a: Var, maps: &AttentionMaps) -> Result<Var> {
    tape.straight_through(a, &maps.quantized)
}

/// Mean of `(sg[a] - a_q)^2`, where `a_q` is gathered from `anchors` so the
/// gradient reaches the anchor values only. `sg[a]` is `maps.continuous`.
pub fn quantization_loss(tape: &mut Tape, maps: &AttentionMaps, anchors: Var) -> Result<Var> {
    let detached = tape.constant(maps.continuous.clone());
    let snapped = tape.gather(anchors, &maps.assignment, maps.continuous.shape())?;
    let diff = tape.sub(detached, snapped)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean of `(a - sg[a_q])^2`; the gradient reaches `a` only.
pub fn commitment_loss(tape: &mut Tape, a: Var, maps: &AttentionMaps) -> Result<Var> {
    let target = tape.constant(maps.quantized.clone());
    let diff = tape.sub(a, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}
