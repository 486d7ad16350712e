//! The training objective: Monte-Carlo cross-entropy under sampled attention
//! and latents, KL to the standard normal prior, and the anchor terms.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian::kl_to_standard_normal;
use crate::model::{AibModel, Bound, ForwardNoise, ForwardOptions, ForwardOutput, QuantizerMode};
use crate::quantizer::{commitment_loss, quantization_loss, AttentionMaps};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scalar values of the four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub quant: f64,
    pub commit: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `nll + beta * kl + lambda_q * quant + lambda_c * commit`.
    pub fn recompose(&self, beta: f64, lambda_q: f64, lambda_c: f64) -> f64 {
        self.nll + beta * self.kl + lambda_q * self.quant + lambda_c * self.commit
    }

    /// First term (in `nll, kl, quant, commit, total` order) that is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("nll", self.nll),
            ("kl", self.kl),
            ("quant", self.quant),
            ("commit", self.commit),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Which terms enter the optimized total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Every term, weighted by the model config.
    #[default]
    Full,
    /// Cross-entropy of the masked classifier alone; the other terms are not recorded.
    CrossEntropyOnly,
}

/// A recorded loss: the scalar root, its parts, and the forward pass behind it.
#[derive(Debug)]
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub output: ForwardOutput,
}

impl LossGraph {
    pub fn maps(&self) -> Vec<AttentionMaps> {
        self.output.maps()
    }
}

/// Records the objective for one batch on `tape`.
///
/// `noise = None` evaluates in mean mode (one deterministic draw).
/// `frozen` replays earlier quantizer snapshots; see [`QuantizerMode::Frozen`].
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &mut Tape,
    model: &AibModel,
    bound: &Bound,
    images: &Tensor,
    labels: &[usize],
    noise: Option<&ForwardNoise>,
    objective: Objective,
    frozen: Option<&[AttentionMaps]>,
) -> Result<LossGraph> {
    let cfg = model.config();
    let x = tape.constant(images.clone());
    let quantizer = match frozen {
        Some(maps) => QuantizerMode::Frozen(maps),
        None => QuantizerMode::Anchors,
    };
    let output = model.forward(tape, bound, x, ForwardOptions { noise, quantizer })?;
    let batch = images.shape()[0] as f64;
    let draws = output.branches.len() as f64;

    let mut ce_terms = Vec::new();
    for branch in &output.branches {
        for &logits in &branch.logits {
            ce_terms.push(tape.softmax_cross_entropy(logits, labels)?);
        }
    }
    let nll_sum = sum_all(tape, &ce_terms)?;
    let nll = tape.scale(nll_sum, 1.0 / ce_terms.len() as f64);

    if objective == Objective::CrossEntropyOnly {
        let value = tape.item(nll);
        return Ok(LossGraph {
            total: nll,
            breakdown: LossBreakdown {
                nll: value,
                total: value,
                ..LossBreakdown::default()
            },
            output,
        });
    }

    let anchors = model.anchors_var(bound);
    let mut kls = Vec::new();
    let mut quants = Vec::new();
    let mut commits = Vec::new();
    for branch in &output.branches {
        let kl = kl_to_standard_normal(tape, &branch.latent)?;
        kls.push(tape.scale(kl, 1.0 / batch));
        quants.push(quantization_loss(tape, &branch.maps, anchors)?);
        commits.push(commitment_loss(tape, branch.a, &branch.maps)?);
    }
    let kl = mean_of(tape, &kls, draws)?;
    let quant = mean_of(tape, &quants, draws)?;
    let commit = mean_of(tape, &commits, draws)?;

    let weighted_kl = tape.scale(kl, cfg.beta);
    let weighted_quant = tape.scale(quant, cfg.lambda_q);
    let weighted_commit = tape.scale(commit, cfg.lambda_c);
    let total = tape.add(nll, weighted_kl)?;
    let total = tape.add(total, weighted_quant)?;
    let total = tape.add(total, weighted_commit)?;

    let breakdown = LossBreakdown {
        nll: tape.item(nll),
        kl: tape.item(kl),
        quant: tape.item(quant),
        commit: tape.item(commit),
        total: tape.item(total),
    };
    Ok(LossGraph {
        total,
        breakdown,
        output,
    })
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_of(tape: &mut Tape, terms: &[Var], count: f64) -> Result<Var> {
    let s = sum_all(tape, terms)?;
    Ok(tape.scale(s, 1.0 / count))
}
