//! Central finite-difference checks of the recorded gradients, for single
//! operations and for every model component.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gaussian::{kl_to_standard_normal, reparam_sample, DiagonalGaussian};
use crate::model::{AibModel, Bound, ConvBlock, ForwardNoise, ForwardOptions, ModelConfig, QuantizerMode};
use crate::noise::{NoiseSource, StreamId};
use crate::objective::{compute_loss, Objective};
use crate::quantizer::{commitment_loss, quantization_loss, quantize, AnchorSet};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for single operations and components.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for the end-to-end loss.
pub const LOSS_TOLERANCE: f64 = 1e-3;
/// Absolute differences at or below this count as agreement.
pub const ABS_FLOOR: f64 = 1e-7;

/// Relative disagreement of one entry; zero when within [`ABS_FLOOR`].
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= ABS_FLOOR {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub entries: usize,
    /// Largest [`entry_error`]; this is what the tolerance applies to.
    pub max_error: f64,
    /// Largest raw absolute difference, for information.
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Largest [`entry_error`] over matching tensors.
pub fn compare(name: &str, analytic: &[Tensor], numeric: &[Tensor], tolerance: f64) -> CheckOutcome {
    let mut entries = 0;
    let mut max_error: f64 = 0.0;
    let mut max_abs_diff: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            entries += 1;
            max_abs_diff = max_abs_diff.max((x - y).abs());
            let e = entry_error(x, y);
            max_error = if e.is_nan() { f64::INFINITY } else { max_error.max(e) };
        }
    }
    CheckOutcome {
        name: name.to_string(),
        entries,
        max_error,
        max_abs_diff,
        tolerance,
        passed: max_error <= tolerance,
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient(inputs: &[Tensor], step: f64, f: &dyn Fn(&[Tensor]) -> Result<f64>) -> Result<Vec<Tensor>> {
    let mut probe = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].numel() {
            let x0 = inputs[t].data()[i];
            probe[t].data_mut()[i] = x0 + step;
            let plus = f(&probe)?;
            probe[t].data_mut()[i] = x0 - step;
            let minus = f(&probe)?;
            probe[t].data_mut()[i] = x0;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct amount.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(&shape[..], |i| 0.5 + ((i * 7919) % 101) as f64 / 101.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Compares `analytic`'s recorded gradient (with `fault` injected) against
/// central differences of `reference`, which must compute the same value.
pub fn check_function(
    name: &str,
    inputs: &[Tensor],
    tolerance: f64,
    fault: Option<OpKind>,
    analytic: &Builder<'_>,
    reference: &Builder<'_>,
) -> Result<CheckOutcome> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = analytic(&mut tape, &vars)?;
    let root = project(&mut tape, out)?;
    let grads = tape.backward(root)?;
    let analytic_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    let numeric = numeric_gradient(inputs, FD_STEP, &|probe| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = reference(&mut tape, &vars)?;
        let root = project(&mut tape, out)?;
        Ok(tape.item(root))
    })?;
    Ok(compare(name, &analytic_grads, &numeric, tolerance))
}

fn check_op(name: &str, inputs: &[Tensor], fault: Option<OpKind>, build: &Builder<'_>) -> Result<CheckOutcome> {
    check_function(name, inputs, OP_TOLERANCE, fault, build, build)
}

/// Central differences over the parameters whose names start with one of
/// `prefixes`, compared against the recorded gradient.
pub fn check_model(
    name: &str,
    model: &AibModel,
    prefixes: &[&str],
    tolerance: f64,
    fault: Option<OpKind>,
    f: &dyn Fn(&mut Tape, &AibModel, &Bound) -> Result<Var>,
) -> Result<CheckOutcome> {
    let selected: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(i, _)| i)
        .collect();

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let bound = model.bind(&mut tape, true);
    let out = f(&mut tape, model, &bound)?;
    let root = project(&mut tape, out)?;
    let grads = tape.backward(root)?;
    let params: Vec<_> = model.params().iter().collect();
    let analytic: Vec<Tensor> = selected
        .iter()
        .map(|&i| grads.get_or_zeros(bound.vars()[i], params[i].value.shape()))
        .collect();

    let mut probe = model.clone();
    let eval = |m: &AibModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let out = f(&mut tape, m, &bound)?;
        let root = project(&mut tape, out)?;
        Ok(tape.item(root))
    };
    let mut numeric = Vec::with_capacity(selected.len());
    for &i in &selected {
        let numel = params[i].value.numel();
        let mut g = Tensor::zeros(params[i].value.shape());
        for k in 0..numel {
            let x0 = params[i].value.data()[k];
            let set = |m: &mut AibModel, v: f64| {
                m.params_mut().iter_mut().nth(i).expect("selected index").value.data_mut()[k] = v;
            };
            set(&mut probe, x0 + FD_STEP);
            let plus = eval(&probe)?;
            set(&mut probe, x0 - FD_STEP);
            let minus = eval(&probe)?;
            set(&mut probe, x0);
            g.data_mut()[k] = (plus - minus) / (2.0 * FD_STEP);
        }
        numeric.push(g);
    }
    Ok(compare(name, &analytic, &numeric, tolerance))
}

/// Model size used by the component checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Small,
}

impl std::str::FromStr for Scale {
    type Err = crate::error::AibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            _ => Err(crate::error::AibError::Config(format!("unknown scale `{s}` (expected tiny or small)"))),
        }
    }
}

pub fn scale_config(scale: Scale) -> ModelConfig {
    match scale {
        Scale::Tiny => {
            let mut c = ModelConfig::new(3, [1, 6, 6]);
            c.backbone = vec![ConvBlock { channels: 3, pool: true }];
            c.latent_dim = 4;
            c.anchors = 5;
            c.att_samples = 2;
            c.z_samples = 2;
            c
        }
        Scale::Small => {
            let mut c = ModelConfig::new(4, [3, 8, 8]);
            c.backbone = vec![
                ConvBlock { channels: 4, pool: true },
                ConvBlock { channels: 6, pool: false },
            ];
            c.encoder = vec![ConvBlock { channels: 4, pool: true }];
            c.latent_dim = 6;
            c.anchors = 8;
            c.att_samples = 2;
            c.z_samples = 3;
            c
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub scale: Scale,
    pub fault: Option<String>,
    pub outcomes: Vec<CheckOutcome>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.outcomes.iter().find(|o| o.name == name)
    }

    /// Fixed-width table: name, entries, max relative error, tolerance, verdict.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<26} {:>8} {:>12} {:>12} {:>10}  result\n",
            "check", "entries", "max_rel_err", "max_abs_diff", "tolerance"
        );
        for o in &self.outcomes {
            writeln!(
                out,
                "{:<26} {:>8} {:>12.3e} {:>12.3e} {:>10.0e}  {}",
                o.name,
                o.entries,
                o.max_error,
                o.max_abs_diff,
                o.tolerance,
                if o.passed { "pass" } else { "FAIL" }
            )
            .expect("string write");
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero, so ReLU kinks stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.5);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Pairwise-distinct values (a shuffled grid), so pooling windows have unique maxima.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape matches")
}

/// Every single-operation check.
pub fn op_checks(fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let r = &mut rng;
    let mut out = Vec::new();
    let pair = [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
    let one = [uniform(r, &[3, 4], -2.0, 2.0)];

    out.push(check_op("add", &pair, fault, &|t, v| t.add(v[0], v[1]))?);
    out.push(check_op("sub", &pair, fault, &|t, v| t.sub(v[0], v[1]))?);
    out.push(check_op("mul", &pair, fault, &|t, v| t.mul(v[0], v[1]))?);
    out.push(check_op("scale", &one, fault, &|t, v| Ok(t.scale(v[0], -2.5)))?);
    out.push(check_op("add_scalar", &one, fault, &|t, v| Ok(t.add_scalar(v[0], 0.3)))?);
    out.push(check_op("relu", &[away_from_zero(r, &[3, 4], 0.05)], fault, &|t, v| Ok(t.relu(v[0])))?);
    let wide = Tensor::new([6], vec![-35.0, -3.0, -0.2, 0.4, 2.5, 35.0])?;
    out.push(check_op("sigmoid", std::slice::from_ref(&wide), fault, &|t, v| Ok(t.sigmoid(v[0])))?);
    out.push(check_op("softplus", &[wide], fault, &|t, v| Ok(t.softplus(v[0])))?);
    out.push(check_op("ln", &[uniform(r, &[3, 4], 0.5, 2.0)], fault, &|t, v| Ok(t.ln(v[0])))?);
    out.push(check_op("square", &one, fault, &|t, v| Ok(t.square(v[0])))?);
    out.push(check_op("sum", &one, fault, &|t, v| Ok(t.sum(v[0])))?);
    out.push(check_op("mean", &one, fault, &|t, v| Ok(t.mean(v[0])))?);
    out.push(check_op("reshape", &one, fault, &|t, v| t.reshape(v[0], &[2, 6]))?);
    out.push(check_op(
        "linear",
        &[uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
        fault,
        &|t, v| t.linear(v[0], v[1], v[2]),
    )?);
    let conv_in = [
        uniform(r, &[2, 3, 8, 8], -1.0, 1.0),
        uniform(r, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(r, &[4], -0.5, 0.5),
    ];
    out.push(check_op("conv2d", &conv_in, fault, &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1))?);
    out.push(check_op("conv2d_stride2", &conv_in, fault, &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0))?);
    out.push(check_op("max_pool2d", &[distinct(r, &[2, 2, 6, 6])], fault, &|t, v| t.max_pool2d(v[0], 2))?);
    out.push(check_op("max_pool2d_ragged", &[distinct(r, &[1, 2, 7, 5])], fault, &|t, v| {
        t.max_pool2d(v[0], 2)
    })?);
    out.push(check_op(
        "channel_mul",
        &[uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[2, 1, 4, 4], 0.0, 1.0)],
        fault,
        &|t, v| t.channel_mul(v[0], v[1]),
    )?);
    out.push(check_op("slice_cols", &[uniform(r, &[3, 8], -1.0, 1.0)], fault, &|t, v| {
        t.slice_cols(v[0], 2, 4)
    })?);
    out.push(check_op(
        "softmax_cross_entropy",
        &[uniform(r, &[4, 5], -3.0, 3.0)],
        fault,
        &|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]),
    )?);

    out.push(check_op(
        "conv_relu_linear_ce",
        &[
            uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(r, &[3, 2, 3, 3], -0.5, 0.5),
            uniform(r, &[3], -0.2, 0.2),
            uniform(r, &[75, 4], -0.3, 0.3),
            uniform(r, &[4], -0.2, 0.2),
        ],
        fault,
        &|t, v| {
            let h = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let h = t.relu(h);
            let h = t.flatten(h)?;
            let logits = t.linear(h, v[3], v[4])?;
            t.softmax_cross_entropy(logits, &[1, 3])
        },
    )?);

    let table = Tensor::new([5], vec![0.0, 0.2, 0.45, 0.7, 1.0])?;
    out.push(check_op("gather", std::slice::from_ref(&table), fault, &|t, v| {
        t.gather(v[0], &[4, 0, 2, 2, 1, 3, 2], &[7])
    })?);

    // Straight-through against its frozen surrogate `a + (a_q0 - a0)`.
    let a0 = uniform(r, &[2, 1, 3, 3], 0.0, 1.0);
    let anchors = AnchorSet::new(table.data().to_vec())?;
    let maps = quantize(&a0, &anchors)?;
    let offset = Tensor::new(
        a0.shape(),
        maps.quantized.data().iter().zip(a0.data()).map(|(q, a)| q - a).collect(),
    )?;
    out.push(check_function(
        "straight_through",
        std::slice::from_ref(&a0),
        OP_TOLERANCE,
        fault,
        &|t, v| t.straight_through(v[0], &maps.quantized),
        &|t, v| {
            let c = t.constant(offset.clone());
            t.add(v[0], c)
        },
    )?);
    out.push(check_op("quantization_loss", &[table], fault, &|t, v| quantization_loss(t, &maps, v[0]))?);
    out.push(check_op("commitment_loss", &[a0], fault, &|t, v| commitment_loss(t, v[0], &maps))?);

    let noise = NoiseSource::new(11).stream(StreamId::Latent).draw(&[3, 4]);
    let gauss = [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.2, 1.5)];
    out.push(check_op("reparam_sample", &gauss, fault, &|t, v| {
        let d = DiagonalGaussian::new(t, v[0], v[1])?;
        reparam_sample(t, &d, &noise)
    })?);
    out.push(check_op("kl_standard_normal", &gauss, fault, &|t, v| {
        let d = DiagonalGaussian::new(t, v[0], v[1])?;
        kl_to_standard_normal(t, &d)
    })?);
    Ok(out)
}

/// Checks of each model component and of the whole loss, at `scale`.
pub fn component_checks(scale: Scale, fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let config = scale_config(scale);
    let model = AibModel::new(config.clone(), 17)?;
    let [c, h, w] = config.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0x636f_6d70);
    let batch = 2;
    let x = uniform(&mut rng, &[batch, c, h, w], -1.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let noise = ForwardNoise::from_source(&config, batch, &NoiseSource::new(23));
    let mut out = Vec::new();

    out.push(check_model("backbone", &model, &["backbone."], OP_TOLERANCE, fault, &|t, m, b| {
        let xv = t.constant(x.clone());
        m.extract_features(t, b, xv)
    })?);

    let att_noise = &noise.attention[0];
    out.push(check_model("attention_head", &model, &["att."], OP_TOLERANCE, fault, &|t, m, b| {
        let xv = t.constant(x.clone());
        let f = m.extract_features(t, b, xv)?;
        let d = m.attention_forward(t, b, f)?;
        reparam_sample(t, &d, att_noise)
    })?);

    let [fc, fh, fw] = config.feature_shape();
    let masked = uniform(&mut rng, &[batch, fc, fh, fw], 0.05, 1.0);
    let eps = &noise.latent[0][0];
    out.push(check_model("encoder", &model, &["encoder."], OP_TOLERANCE, fault, &|t, m, b| {
        let mv = t.constant(masked.clone());
        let d = m.encode(t, b, mv)?;
        reparam_sample(t, &d, eps)
    })?);

    let z = uniform(&mut rng, &[batch, config.latent_dim], -1.0, 1.0);
    out.push(check_model("decoder", &model, &["decoder."], OP_TOLERANCE, fault, &|t, m, b| {
        let zv = t.constant(z.clone());
        m.decode(t, b, zv)
    })?);

    // Snapshot the quantizer at the current parameters, then differentiate
    // the surrogate that replays it.
    let frozen = {
        let mut t = Tape::new();
        let b = model.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let opts = ForwardOptions {
            noise: Some(&noise),
            quantizer: QuantizerMode::Anchors,
        };
        model.forward(&mut t, &b, xv, opts)?.maps()
    };
    let full = |t: &mut Tape, m: &AibModel, b: &Bound| -> Result<Var> {
        let loss = compute_loss(t, m, b, &x, &labels, Some(&noise), Objective::Full, Some(&frozen))?;
        Ok(loss.total)
    };
    out.push(check_model("quantizer_surrogate", &model, &["att.", "anchors"], OP_TOLERANCE, fault, &full)?);
    out.push(check_model("full_loss", &model, &[""], LOSS_TOLERANCE, fault, &full)?);
    Ok(out)
}

/// The whole suite: operations, then components.
pub fn run_suite(scale: Scale, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut outcomes = op_checks(fault)?;
    outcomes.extend(component_checks(scale, fault)?);
    Ok(GradcheckReport {
        scale,
        fault: fault.map(|k| k.name().to_string()),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_error_floor_and_ratio() {
        assert_eq!(entry_error(1.0, 1.0 + 1e-8), 0.0);
        assert!((entry_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(entry_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn numeric_gradient_of_cubic() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&[x], FD_STEP, &|p| Ok(p[0].data().iter().map(|v| v * v * v).sum())).unwrap();
        for (gi, xi) in g[0].data().iter().zip([1.0f64, -2.0, 0.5]) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn every_op_passes() {
        let outcomes = op_checks(None).unwrap();
        for o in &outcomes {
            assert!(o.passed, "{} max error {:e}", o.name, o.max_error);
        }
    }

    #[test]
    fn tiny_components_pass() {
        for o in component_checks(Scale::Tiny, None).unwrap() {
            assert!(o.passed, "{} max error {:e}", o.name, o.max_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let outcomes = op_checks(Some(OpKind::Softplus)).unwrap();
        let sp = outcomes.iter().find(|o| o.name == "softplus").unwrap();
        assert!(!sp.passed);
        assert!(outcomes.iter().find(|o| o.name == "sigmoid").unwrap().passed);
    }
}
