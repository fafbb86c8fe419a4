use crate::error::{Error, Result};

use super::{Rng, Scalar, Tape, Tensor, Var};

/// Reparametrised Gaussian draw `mu + sigma * eps`, `eps ~ N(0, 1)`.
///
/// The noise enters the tape as a constant, so gradients reach `mu` and
/// `sigma` only.
pub fn sample_gaussian<T: Scalar>(
    tape: &mut Tape<T>,
    rng: &mut Rng,
    mu: Var,
    sigma: Var,
) -> Result<Var> {
    if tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::shape("sample_gaussian", tape.shape(mu), tape.shape(sigma)));
    }
    if let Some(bad) = tape.value(sigma).data().iter().find(|&&s| !(s > T::zero())) {
        return Err(Error::contract(format!(
            "sample_gaussian requires sigma > 0, got {bad}"
        )));
    }
    let shape = tape.shape(mu).to_vec();
    let eps = Tensor::from_fn(shape, |_| T::lit(rng.normal()));
    let eps = tape.constant(eps);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Gumbel-softmax relaxation `softmax((logits + g) / tau)` over the last axis.
pub fn sample_gumbel_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    rng: &mut Rng,
    logits: Var,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!(
            "gumbel-softmax temperature must be positive, got {tau}"
        )));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.is_empty() {
        return Err(Error::shape("sample_gumbel_softmax", &shape, &[]));
    }
    let g = Tensor::from_fn(shape.clone(), |_| T::lit(rng.gumbel()));
    let g = tape.constant(g);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(scaled, shape.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_sigma_returns_mu() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(1);
        let mu = tape.leaf(Tensor::from_f64([3], &[0.3, -1.0, 2.0]).unwrap());
        let sigma = tape.constant(Tensor::full([3], 1e-9));
        let z = sample_gaussian(&mut tape, &mut rng, mu, sigma).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(tape.value(mu).data()) {
            assert!((a - b).abs() < 1e-7);
        }
        let loss = tape.sum_all(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(mu).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_sigma_and_tau() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(1);
        let mu = tape.leaf(Tensor::zeros([2]));
        let sigma = tape.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
        assert!(matches!(
            sample_gaussian(&mut tape, &mut rng, mu, sigma),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            sample_gumbel_softmax(&mut tape, &mut rng, mu, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gumbel_softmax_on_simplex() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(9);
        let logits = tape.leaf(Tensor::from_fn([50, 4], |i| (i as f32 * 0.37).sin() * 3.0));
        let y = sample_gumbel_softmax(&mut tape, &mut rng, logits, 0.5).unwrap();
        let v = tape.value(y);
        for r in 0..v.rows() {
            let s: f32 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
