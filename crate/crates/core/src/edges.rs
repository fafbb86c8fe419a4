//! Edge prior and edge encoder heads, categorical sampling and KL.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{sample_gumbel_softmax, Activation, Bound, Mlp, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Floor added inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Gumbel-softmax relaxation.
    #[default]
    Soft,
    /// Straight-through: one-hot forward, relaxed gradient.
    Hard,
    /// Deterministic one-hot of the largest logit.
    Argmax,
}

#[derive(Clone, Debug)]
pub struct EdgeHeads {
    pub f_prior: Mlp,
    pub f_enc: Mlp,
    pub n_types: usize,
}

impl EdgeHeads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, hidden: usize, n_types: usize, rng: &mut Rng) -> Self {
        assert!(n_types >= 2, "need at least two edge types");
        EdgeHeads {
            f_prior: Mlp::new(store, "edges.f_prior", &[hidden, hidden, n_types], Activation::Elu, false, rng),
            f_enc: Mlp::new(store, "edges.f_enc", &[2 * hidden, hidden, n_types], Activation::Elu, false, rng),
            n_types,
        }
    }

    /// Logits of the next segment's type from the forward state.
    pub fn prior_logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, h_prior: Var) -> Result<Var> {
        self.f_prior.forward(tape, p, h_prior)
    }

    /// Posterior logits from `[reverse, forward]` states.
    pub fn encoder_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_reverse: Var,
        h_prior: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[h_reverse, h_prior])?;
        self.f_enc.forward(tape, p, x)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn one_hot_like<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let c = probs.cols();
    let mut out = Tensor::zeros(probs.shape().to_vec());
    for r in 0..probs.rows() {
        let k = argmax(probs.row(r));
        out.data_mut()[r * c + k] = T::one();
    }
    out
}

/// Row-wise argmax of a `[rows, e]` tensor.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows()).map(|r| argmax(t.row(r))).collect()
}

/// Samples one edge-type vector per row of `logits`.
pub fn sample_edges<T: Scalar>(
    tape: &mut Tape<T>,
    rng: &mut Rng,
    logits: Var,
    tau: f64,
    mode: SampleMode,
) -> Result<Var> {
    match mode {
        SampleMode::Soft => sample_gumbel_softmax(tape, rng, logits, tau),
        SampleMode::Hard => {
            let soft = sample_gumbel_softmax(tape, rng, logits, tau)?;
            let sv = tape.value(soft);
            let hard = one_hot_like(sv);
            let shift = Tensor::new(
                hard.shape().to_vec(),
                hard.data().iter().zip(sv.data()).map(|(&h, &s)| h - s).collect(),
            )?;
            let shift = tape.constant(shift);
            // forward: exactly one-hot; backward: through the relaxed sample
            let out = tape.add(soft, shift)?;
            Ok(out)
        }
        SampleMode::Argmax => {
            let hard = one_hot_like(tape.value(logits));
            Ok(tape.constant(hard))
        }
    }
}

/// Row-wise categorical `KL(softmax(q) || softmax(p))` as `[rows, 1]`.
pub fn edge_kl<T: Scalar>(tape: &mut Tape<T>, enc_logits: Var, prior_logits: Var) -> Result<Var> {
    let q = tape.softmax(enc_logits, tape.shape(enc_logits).len() - 1)?;
    let p = tape.softmax(prior_logits, tape.shape(prior_logits).len() - 1)?;
    let qf = tape.affine(q, 1.0, PROB_FLOOR);
    let pf = tape.affine(p, 1.0, PROB_FLOOR);
    let lq = tape.log(qf)?;
    let lp = tape.log(pf)?;
    let d = tape.sub(lq, lp)?;
    let terms = tape.mul(q, d)?;
    Ok(tape.sum_cols(terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_all(store: &mut ParamStore<f64>) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
    }

    #[test]
    fn zero_weights_are_uniform() {
        let mut store = ParamStore::<f64>::new();
        let heads = EdgeHeads::new(&mut store, 4, 3, &mut Rng::new(0));
        zero_all(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::full([2, 4], 0.3));
        let lp = heads.prior_logits(&mut tape, &p, h).unwrap();
        let le = heads.encoder_logits(&mut tape, &p, h, h).unwrap();
        for l in [lp, le] {
            let probs = tape.softmax(l, 1).unwrap();
            for v in tape.value(probs).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_with_dead_reverse_block_matches_prior_readout() {
        let (h, e) = (4, 2);
        let mut store = ParamStore::<f64>::new();
        let heads = EdgeHeads::new(&mut store, h, e, &mut Rng::new(3));
        // copy the prior's first layer into the forward block of the encoder
        let enc_w = heads.f_enc.layers[0].weight;
        let pri_w = heads.f_prior.layers[0].weight;
        let pw = store.get(pri_w).clone();
        let w = Tensor::from_fn([2 * h, h], |k| if k < h * h { 0.0 } else { pw.data()[k - h * h] });
        *store.get_mut(enc_w) = w;
        for (a, b) in [
            (heads.f_enc.layers[0].bias, heads.f_prior.layers[0].bias),
            (heads.f_enc.layers[1].weight, heads.f_prior.layers[1].weight),
            (heads.f_enc.layers[1].bias, heads.f_prior.layers[1].bias),
        ] {
            let v = store.get(b).clone();
            *store.get_mut(a) = v;
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = Rng::new(4);
        let hp = tape.constant(Tensor::from_fn([3, h], |_| rng.normal()));
        let hr = tape.constant(Tensor::zeros([3, h]));
        let a = heads.encoder_logits(&mut tape, &p, hr, hp).unwrap();
        let b = heads.prior_logits(&mut tape, &p, hp).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn argmax_and_hard_modes() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(1);
        let l = tape.leaf(Tensor::from_f64([1, 2], &[0.1, 2.0]).unwrap());
        let a = sample_edges(&mut tape, &mut rng, l, 0.5, SampleMode::Argmax).unwrap();
        assert_eq!(tape.value(a).data(), &[0.0, 1.0]);

        let l = tape.leaf(Tensor::from_fn([20, 3], |k| (k as f32).cos()));
        let h = sample_edges(&mut tape, &mut rng, l, 0.5, SampleMode::Hard).unwrap();
        let v = tape.value(h);
        for r in 0..20 {
            let row = v.row(r);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 2);
        }
        let loss = tape.sum_all(h);
        let w = tape.constant(Tensor::from_fn([20, 3], |k| k as f32));
        let weighted = tape.mul(h, w).unwrap();
        let loss2 = tape.sum_all(weighted);
        let _ = tape.backward(loss).unwrap();
        let g = tape.backward(loss2).unwrap();
        assert!(g.get(l).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64([1, 3], &[0.3, -1.0, 2.0]).unwrap());
        let kl = edge_kl(&mut tape, a, a).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-15);

        // q = [1, 0] (large logit gap), p uniform -> log 2
        let q = tape.constant(Tensor::from_f64([1, 2], &[0.0, -800.0]).unwrap());
        let p = tape.constant(Tensor::from_f64([1, 2], &[0.0, 0.0]).unwrap());
        let kl = edge_kl(&mut tape, q, p).unwrap();
        assert!((tape.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
