//! Recurrent message-passing decoder predicting the next state of every
//! agent from the current one and the per-edge type samples.

use crate::encoder::FrameGraph;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Bound, GruCell, Mlp, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::sim::STATE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Ground truth is fed at every step.
    TeacherForced,
    /// Ground truth is fed before `t_obs`, predictions afterwards.
    FreeRunning,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// One message function per edge type except type 0 (no interaction).
    pub messages: Vec<Mlp>,
    pub cell: GruCell,
    pub output: Mlp,
    pub hidden: usize,
    pub n_types: usize,
    pub out_variance: f64,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        hidden: usize,
        n_types: usize,
        out_variance: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(out_variance > 0.0, "output variance must be positive");
        let msg_in = 2 * (STATE_DIM + hidden);
        let messages = (1..n_types)
            .map(|m| {
                Mlp::new(
                    store,
                    &format!("decoder.msg{m}"),
                    &[msg_in, hidden, hidden],
                    Activation::Elu,
                    true,
                    rng,
                )
            })
            .collect();
        Decoder {
            messages,
            cell: GruCell::new(store, "decoder.cell", STATE_DIM + hidden, hidden, rng),
            output: Mlp::new(store, "decoder.out", &[hidden, hidden, STATE_DIM], Activation::Elu, false, rng),
            hidden,
            n_types,
            out_variance,
        }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, node_rows: usize) -> Var {
        tape.constant(Tensor::zeros([node_rows, self.hidden]))
    }

    /// One step: `x_t` `[node_rows, 4]`, node state `[node_rows, H]`, edge
    /// samples `[edge_rows, e]` (`None` means every edge is type 0).
    pub fn decode_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        x: Var,
        state: Var,
        edges: Option<Var>,
    ) -> Result<(Var, Var)> {
        let nodes = graph.node_rows();
        if tape.shape(x) != [nodes, STATE_DIM] {
            return Err(Error::shape("decode_step", tape.shape(x), &[nodes, STATE_DIM]));
        }
        let incoming = match edges {
            Some(e) if graph.edge_rows() > 0 => {
                if tape.shape(e) != [graph.edge_rows(), self.n_types] {
                    return Err(Error::shape(
                        "decode_step edges",
                        tape.shape(e),
                        &[graph.edge_rows(), self.n_types],
                    ));
                }
                let xs = tape.concat_cols(&[x, state])?;
                let send = tape.gather_rows(xs, &graph.senders)?;
                let recv = tape.gather_rows(xs, &graph.receivers)?;
                let pre = tape.concat_cols(&[send, recv])?;
                let mut total: Option<Var> = None;
                for (k, mlp) in self.messages.iter().enumerate() {
                    let msg = mlp.forward(tape, p, pre)?;
                    let w = tape.slice_cols(e, k + 1, 1)?;
                    let msg = tape.mul_col(msg, w)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, msg)?,
                        None => msg,
                    });
                }
                match total {
                    Some(m) => tape.scatter_add_rows(m, &graph.receivers, nodes)?,
                    None => tape.constant(Tensor::zeros([nodes, self.hidden])),
                }
            }
            _ => tape.constant(Tensor::zeros([nodes, self.hidden])),
        };
        let cell_in = tape.concat_cols(&[x, incoming])?;
        let next = self.cell.step(tape, p, cell_in, state)?;
        let delta = self.output.forward(tape, p, next)?;
        let pred = tape.add(x, delta)?;
        Ok((pred, next))
    }

    /// Runs the decoder over a sequence. `xs[t]` are ground-truth states and
    /// `edges[s]` the samples used to predict state `s`; type 0 is assumed
    /// before `t_obs`. Returns the predictions of states `1..T`.
    pub fn rollout<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        xs: &[Var],
        edges: &[Option<Var>],
        t_obs: usize,
        mode: RolloutMode,
    ) -> Result<Vec<Var>> {
        let horizon = xs.len();
        if edges.len() != horizon {
            return Err(Error::contract(format!(
                "edge samples cover {} steps, trajectory has {horizon}",
                edges.len()
            )));
        }
        if let Some(s) = (t_obs..horizon).find(|&s| edges[s].is_none()) {
            return Err(Error::contract(format!("no edge sample for step {s}")));
        }
        let mut state = self.zero_state(tape, graph.node_rows());
        let mut x = xs[0];
        let mut preds = Vec::with_capacity(horizon.saturating_sub(1));
        for s in 1..horizon {
            let e = if s >= t_obs { edges[s] } else { None };
            let (pred, next) = self.decode_step(tape, p, graph, x, state, e)?;
            state = next;
            preds.push(pred);
            x = match mode {
                RolloutMode::TeacherForced => xs[s],
                RolloutMode::FreeRunning if s < t_obs => xs[s],
                RolloutMode::FreeRunning => pred,
            };
        }
        Ok(preds)
    }
}

/// Gaussian negative log-likelihood with fixed variance, constant dropped:
/// `sum((pred - target)^2) / (2 * variance)`.
pub fn nll<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, variance: f64) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("nll", tape.shape(pred), tape.shape(target)));
    }
    let sq = tape.square(d)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / (2.0 * variance)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(n_types: usize) -> (ParamStore<f64>, Decoder) {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, 6, n_types, 5e-5, &mut Rng::new(2));
        (store, dec)
    }

    fn rand_states(rows: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        Tensor::from_fn([rows, 4], |_| r.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn zero_output_weights_predict_identity() {
        let (mut store, dec) = build(2);
        for l in &dec.output.layers {
            for id in [l.weight, l.bias] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(shape);
            }
        }
        let graph = FrameGraph::new(2, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(rand_states(6, 1));
        let h = dec.zero_state(&mut tape, 6);
        let e = tape.constant(Tensor::from_fn([12, 2], |k| (k % 2) as f64));
        let (pred, _) = dec.decode_step(&mut tape, &p, &graph, x, h, Some(e)).unwrap();
        assert_eq!(tape.value(pred).data(), tape.value(x).data());
    }

    #[test]
    fn no_interaction_edges_decouple_agents() {
        let (store, dec) = build(3);
        let graph = FrameGraph::new(1, 3);
        let x0 = rand_states(3, 5);
        let mut x1 = x0.clone();
        x1.data_mut()[0] += 0.5; // perturb agent 0
        let type0 = Tensor::from_fn([6, 3], |k| if k % 3 == 0 { 1.0 } else { 0.0 });
        let run = |x: &Tensor<f64>, edges: Option<&Tensor<f64>>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let h = dec.zero_state(&mut tape, 3);
            let e = edges.map(|e| tape.constant(e.clone()));
            let (pred, _) = dec.decode_step(&mut tape, &p, &graph, xv, h, e).unwrap();
            tape.value(pred).data().to_vec()
        };
        let a = run(&x0, Some(&type0));
        let b = run(&x1, Some(&type0));
        assert_eq!(a[4..], b[4..]);
        assert_eq!(a, run(&x0, None));
        // with an active edge 0 -> 1 agent 1 sees agent 0's perturbation
        let mut active = type0.clone();
        active.data_mut()[0] = 0.0;
        active.data_mut()[1] = 1.0;
        let c = run(&x0, Some(&active));
        let d = run(&x1, Some(&active));
        assert_ne!(c[4..8], d[4..8]);
        assert_eq!(c[8..], d[8..]);
    }

    #[test]
    fn single_agent_has_no_edges() {
        let (store, dec) = build(2);
        let graph = FrameGraph::new(1, 1);
        assert_eq!(graph.edge_rows(), 0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(rand_states(1, 9));
        let h = dec.zero_state(&mut tape, 1);
        let (pred, _) = dec.decode_step(&mut tape, &p, &graph, x, h, None).unwrap();
        assert_eq!(tape.shape(pred), &[1, 4]);
    }

    #[test]
    fn nll_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(rand_states(3, 1));
        let z = nll(&mut tape, a, a, 5e-5).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let p = tape.constant(Tensor::scalar(0.2));
        let t = tape.constant(Tensor::scalar(0.0));
        let v = nll(&mut tape, p, t, 5e-5).unwrap();
        assert!((tape.value(v).item() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn rollout_requires_edges_after_burn_in() {
        let (store, dec) = build(2);
        let graph = FrameGraph::new(1, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = (0..4).map(|t| tape.constant(rand_states(2, t))).collect();
        let edges = vec![None; 4];
        assert!(matches!(
            dec.rollout(&mut tape, &p, &graph, &xs, &edges, 2, RolloutMode::TeacherForced),
            Err(Error::Contract(_))
        ));
    }
}
