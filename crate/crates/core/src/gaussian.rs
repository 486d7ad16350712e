//! Diagonal Gaussians on the tape: reparameterized sampling and the KL
//! divergence to the standard normal prior.

use crate::error::{AibError, Result};
use crate::noise::NoiseDraw;
use crate::tape::{Tape, Var};

/// Per-element mean and scale, both recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiagonalGaussian {
    pub mu: Var,
    pub sigma: Var,
}

impl DiagonalGaussian {
    /// Checks `shape(mu) == shape(sigma)` and `sigma > 0`.
    pub fn new(tape: &Tape, mu: Var, sigma: Var) -> Result<Self> {
        if tape.shape(mu) != tape.shape(sigma) {
            return Err(AibError::Dimension(format!(
                "gaussian: mu {:?} and sigma {:?} differ",
                tape.shape(mu),
                tape.shape(sigma)
            )));
        }
        if let Some(bad) = tape.value(sigma).data().iter().find(|s| !(**s > 0.0)) {
            return Err(AibError::Domain(format!("gaussian: sigma must be positive, found {bad}")));
        }
        Ok(DiagonalGaussian { mu, sigma })
    }

    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t [usize] {
        tape.shape(self.mu)
    }
}

/// `mu + sigma * epsilon`; the noise is a constant on the tape.
pub fn reparam_sample(tape: &mut Tape, dist: &DiagonalGaussian, noise: &NoiseDraw) -> Result<Var> {
    if noise.epsilon.shape() != dist.shape(tape) {
        return Err(AibError::Dimension(format!(
            "reparam_sample: noise {:?} for distribution {:?}",
            noise.epsilon.shape(),
            dist.shape(tape)
        )));
    }
    let eps = tape.constant(noise.epsilon.clone());
    let spread = tape.mul(dist.sigma, eps)?;
    tape.add(dist.mu, spread)
}

/// `sum_k 0.5 * (mu_k^2 + sigma_k^2 - 1 - 2 ln sigma_k)`, summed over every element.
pub fn kl_to_standard_normal(tape: &mut Tape, dist: &DiagonalGaussian) -> Result<Var> {
    if let Some(bad) = tape.value(dist.sigma).data().iter().find(|s| !(**s > 0.0)) {
        return Err(AibError::Domain(format!("kl: sigma must be positive, found {bad}")));
    }
    let mu2 = tape.square(dist.mu);
    let s2 = tape.square(dist.sigma);
    let ln_s = tape.ln(dist.sigma);
    let two_ln_s = tape.scale(ln_s, 2.0);
    let quad = tape.add(mu2, s2)?;
    let shifted = tape.add_scalar(quad, -1.0);
    let per_elem = tape.sub(shifted, two_ln_s)?;
    let total = tape.sum(per_elem);
    Ok(tape.scale(total, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{standard_normal_source, StreamId};
    use crate::tensor::Tensor;

    fn gaussian(tape: &mut Tape, mu: &[f64], sigma: &[f64]) -> DiagonalGaussian {
        let mu = tape.param(Tensor::new([mu.len()], mu.to_vec()).unwrap());
        let sigma = tape.param(Tensor::new([sigma.len()], sigma.to_vec()).unwrap());
        DiagonalGaussian::new(tape, mu, sigma).unwrap()
    }

    #[test]
    fn kl_spot_values() {
        let mut tape = Tape::new();
        let d = gaussian(&mut tape, &[0.0; 5], &[1.0; 5]);
        let kl = kl_to_standard_normal(&mut tape, &d).unwrap();
        assert_eq!(tape.item(kl), 0.0);

        let d = gaussian(&mut tape, &[1.0], &[1.0]);
        let kl = kl_to_standard_normal(&mut tape, &d).unwrap();
        assert!((tape.item(kl) - 0.5).abs() < 1e-12);

        let d = gaussian(&mut tape, &[0.0], &[2.0]);
        let kl = kl_to_standard_normal(&mut tape, &d).unwrap();
        assert!((tape.item(kl) - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::zeros([2]));
        let sigma = tape.param(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(DiagonalGaussian::new(&tape, mu, sigma), Err(AibError::Domain(_))));
        let unchecked = DiagonalGaussian { mu, sigma };
        assert!(matches!(kl_to_standard_normal(&mut tape, &unchecked), Err(AibError::Domain(_))));
    }

    #[test]
    fn reparam_identity_and_degenerate_spread() {
        let source = standard_normal_source(3);
        let noise = source.stream(StreamId::Latent).draw(&[4]);
        let mut tape = Tape::new();
        let d = gaussian(&mut tape, &[0.0; 4], &[1.0; 4]);
        let z = reparam_sample(&mut tape, &d, &noise).unwrap();
        assert_eq!(tape.value(z), &noise.epsilon);

        let d = gaussian(&mut tape, &[0.5, -1.0, 2.0, 3.0], &[1e-12; 4]);
        let z = reparam_sample(&mut tape, &d, &noise).unwrap();
        for (v, m) in tape.value(z).data().iter().zip([0.5, -1.0, 2.0, 3.0]) {
            assert!((v - m).abs() < 1e-10);
        }

        let wrong = source.stream(StreamId::Latent).draw(&[3]);
        assert!(matches!(reparam_sample(&mut tape, &d, &wrong), Err(AibError::Dimension(_))));
    }

    #[test]
    fn reparam_moments() {
        let n = 100_000;
        let noise = standard_normal_source(5).stream(StreamId::Latent).draw(&[n]);
        let mut tape = Tape::new();
        let d = gaussian(&mut tape, &vec![2.0; n], &vec![3.0; n]);
        let z = reparam_sample(&mut tape, &d, &noise).unwrap();
        let data = tape.value(z).data();
        let mean = data.iter().sum::<f64>() / n as f64;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
        assert!((var - 9.0).abs() / 9.0 < 0.02, "variance {var}");
    }

    #[test]
    fn reparam_gradient_skips_noise() {
        let noise = standard_normal_source(9).stream(StreamId::Attention).draw(&[3]);
        let mut tape = Tape::new();
        let d = gaussian(&mut tape, &[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]);
        let z = reparam_sample(&mut tape, &d, &noise).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(d.mu).unwrap().data(), &[1.0; 3]);
        assert_eq!(g.get(d.sigma).unwrap().data(), noise.epsilon.data());
    }
}
