//! Per-step relational embedding (node -> edge -> node -> edge message
//! passing) and the forward/reverse recurrences over those embeddings.

use crate::error::{Error, Result};
use crate::numeric::{Activation, Bound, LstmCell, LstmState, Mlp, ParamStore, Rng, Scalar, Tape, Var};
use crate::sim::{edge_pairs, STATE_DIM};

/// Row bookkeeping for a stack of independent fully connected graphs.
///
/// Node rows are `frame * n_agents + agent`; edge rows are
/// `frame * n_edges + k` with `k` indexing [`edge_pairs`].
#[derive(Clone, Debug)]
pub struct FrameGraph {
    pub n_frames: usize,
    pub n_agents: usize,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl FrameGraph {
    pub fn new(n_frames: usize, n_agents: usize) -> Self {
        let pairs = edge_pairs(n_agents);
        let mut senders = Vec::with_capacity(n_frames * pairs.len());
        let mut receivers = Vec::with_capacity(n_frames * pairs.len());
        for f in 0..n_frames {
            for &(i, j) in &pairs {
                senders.push(f * n_agents + i);
                receivers.push(f * n_agents + j);
            }
        }
        FrameGraph {
            n_frames,
            n_agents,
            senders,
            receivers,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.n_agents * (self.n_agents - 1)
    }

    pub fn node_rows(&self) -> usize {
        self.n_frames * self.n_agents
    }

    pub fn edge_rows(&self) -> usize {
        self.senders.len()
    }
}

/// Weights of the relational encoder.
#[derive(Clone, Debug)]
pub struct RelationalEncoder {
    pub f_emb: Mlp,
    pub f_e1: Mlp,
    pub f_v1: Mlp,
    pub f_emb2: Mlp,
    pub forward_cell: LstmCell,
    pub reverse_cell: LstmCell,
    pub hidden: usize,
    /// Width of the extra input fed to the forward cell alongside the edge
    /// embedding (0 unless edge-sample feedback is enabled).
    pub feedback_dim: usize,
}

/// Per-step edge states, each `[edge_rows, hidden]`.
#[derive(Clone, Debug)]
pub struct EdgeEmbeddings {
    pub h_emb: Vec<Var>,
    pub h_prior: Vec<Var>,
    pub h_reverse: Vec<Var>,
}

impl RelationalEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        hidden: usize,
        feedback_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let h = hidden;
        let act = Activation::Elu;
        RelationalEncoder {
            f_emb: Mlp::new(store, "encoder.f_emb", &[STATE_DIM, h, h], act, true, rng),
            f_e1: Mlp::new(store, "encoder.f_e1", &[2 * h, h, h], act, true, rng),
            f_v1: Mlp::new(store, "encoder.f_v1", &[h, h, h], act, true, rng),
            f_emb2: Mlp::new(store, "encoder.f_emb2", &[2 * h, h, h], act, true, rng),
            forward_cell: LstmCell::new(store, "encoder.forward", h + feedback_dim, h, rng),
            reverse_cell: LstmCell::new(store, "encoder.reverse", h, h, rng),
            hidden,
            feedback_dim,
        }
    }

    /// Edge embeddings `[edge_rows, H]` for node states `x` `[node_rows, 4]`.
    pub fn embed_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != STATE_DIM || shape[0] != graph.node_rows() {
            return Err(Error::shape(
                "embed_step",
                &shape,
                &[graph.node_rows(), STATE_DIM],
            ));
        }
        if graph.n_agents < 2 {
            return Err(Error::contract("relational embedding needs at least 2 agents"));
        }
        let h1 = self.f_emb.forward(tape, p, x)?;
        let pair = self.pair(tape, graph, h1)?;
        let he1 = self.f_e1.forward(tape, p, pair)?;
        let incoming = tape.scatter_add_rows(he1, &graph.receivers, graph.node_rows())?;
        let h2 = self.f_v1.forward(tape, p, incoming)?;
        let pair = self.pair(tape, graph, h2)?;
        self.f_emb2.forward(tape, p, pair)
    }

    fn pair<T: Scalar>(&self, tape: &mut Tape<T>, graph: &FrameGraph, nodes: Var) -> Result<Var> {
        let s = tape.gather_rows(nodes, &graph.senders)?;
        let r = tape.gather_rows(nodes, &graph.receivers)?;
        tape.concat_cols(&[s, r])
    }

    pub fn forward_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_emb: Var,
        feedback: Option<Var>,
        state: LstmState,
    ) -> Result<LstmState> {
        let input = match (self.feedback_dim, feedback) {
            (0, _) => h_emb,
            (_, Some(fb)) => tape.concat_cols(&[h_emb, fb])?,
            (_, None) => return Err(Error::contract("forward cell expects edge feedback input")),
        };
        self.forward_cell.step(tape, p, input, state)
    }

    /// Causal recurrence, zero state before the first step. Without feedback
    /// only.
    pub fn roll_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_emb: &[Var],
    ) -> Result<Vec<Var>> {
        let Some(&first) = h_emb.first() else {
            return Ok(Vec::new());
        };
        let rows = tape.value(first).rows();
        let mut state = self.forward_cell.zero_state(tape, rows);
        let mut out = Vec::with_capacity(h_emb.len());
        for &e in h_emb {
            let feedback = if self.feedback_dim > 0 {
                Some(tape.constant(crate::numeric::Tensor::zeros([rows, self.feedback_dim])))
            } else {
                None
            };
            state = self.forward_step(tape, p, e, feedback, state)?;
            out.push(state.h);
        }
        Ok(out)
    }

    /// Anti-causal recurrence, zero state after the last step.
    pub fn roll_reverse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_emb: &[Var],
    ) -> Result<Vec<Var>> {
        let Some(&first) = h_emb.first() else {
            return Ok(Vec::new());
        };
        let rows = tape.value(first).rows();
        let mut state = self.reverse_cell.zero_state(tape, rows);
        let mut out = vec![first; h_emb.len()];
        for (t, &e) in h_emb.iter().enumerate().rev() {
            state = self.reverse_cell.step(tape, p, e, state)?;
            out[t] = state.h;
        }
        Ok(out)
    }

    /// Embeds `T` steps of node states at once (stacked as
    /// `[T * node_rows, 4]`) and returns one `[edge_rows, H]` slice per step.
    pub fn embed_sequence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        steps: &[Var],
    ) -> Result<Vec<Var>> {
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        let stacked = tape.stack_rows(steps)?;
        let big = FrameGraph::new(graph.n_frames * steps.len(), graph.n_agents);
        let emb = self.embed_step(tape, p, &big, stacked)?;
        let rows = graph.edge_rows();
        (0..steps.len())
            .map(|t| tape.slice_rows(emb, t * rows, rows))
            .collect()
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        steps: &[Var],
    ) -> Result<EdgeEmbeddings> {
        let h_emb = self.embed_sequence(tape, p, graph, steps)?;
        let h_prior = self.roll_forward(tape, p, &h_emb)?;
        let h_reverse = self.roll_reverse(tape, p, &h_emb)?;
        Ok(EdgeEmbeddings {
            h_emb,
            h_prior,
            h_reverse,
        })
    }
}
