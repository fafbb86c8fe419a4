//! The full model: relational encoder, duration head, edge heads and
//! decoder, unrolled jointly over a batch of trajectories.
//!
//! Step `t` consumes the input state `x_t`, advances the forward recurrence,
//! closes any segments whose last step is `t` (opening the next ones from the
//! state at `t`) and predicts `x_{t+1}`. Predictions of states before `t_obs`
//! use no messages and are excluded from the loss.

use serde::{Deserialize, Serialize};

use crate::decoder::{nll, Decoder, RolloutMode};
use crate::edges::{argmax_rows, edge_kl, sample_edges, EdgeHeads, SampleMode};
use crate::encoder::{FrameGraph, RelationalEncoder};
use crate::error::{Error, Result};
use crate::numeric::{Bound, LstmState, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::segmenter::{draw_durations, duration_kl, values, DurationHead, DurationMode, DurationVariant, ScheduleBuilder, SegmentSchedule};
use crate::sim::{TrajectoryBatch, STATE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub edge_types: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub duration_variant: DurationVariant,
    /// Feed the current edge sample back into the forward recurrence.
    pub edge_feedback: bool,
    pub out_variance: f64,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
    pub d_min: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_agents: 3,
            edge_types: 2,
            encoder_hidden: 64,
            decoder_hidden: 64,
            duration_variant: DurationVariant::PastOnly,
            edge_feedback: false,
            out_variance: 5e-5,
            prior_mu0: 0.0,
            prior_sigma0: 1.0,
            d_min: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(m.to_string()));
        if self.n_agents < 2 {
            return bad("model needs at least 2 agents");
        }
        if self.edge_types < 2 {
            return bad("edge_types must be at least 2");
        }
        if self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(self.out_variance > 0.0) {
            return bad("out_variance must be positive");
        }
        if !(self.prior_sigma0 > 0.0) {
            return bad("prior_sigma0 must be positive");
        }
        if self.d_min == 0 {
            return bad("d_min must be at least 1");
        }
        Ok(())
    }
}

/// Where edge samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeSource {
    /// Posterior from forward and reverse states (training).
    Encoder,
    /// Causal prior (inference).
    Prior,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub t_obs: usize,
    pub edge_source: EdgeSource,
    pub sample_mode: SampleMode,
    pub tau: f64,
    pub duration: DurationMode,
    pub rollout: RolloutMode,
}

impl RunOptions {
    pub fn training(t_obs: usize, tau: f64, duration: DurationMode) -> Self {
        RunOptions {
            t_obs,
            edge_source: EdgeSource::Encoder,
            sample_mode: SampleMode::Soft,
            tau,
            duration,
            rollout: RolloutMode::TeacherForced,
        }
    }

    /// Free-running rollout with prior edges, argmax types and posterior-mean
    /// durations (or the forced duration, if one is given).
    pub fn inference(t_obs: usize, forced: Option<usize>) -> Self {
        RunOptions {
            t_obs,
            edge_source: EdgeSource::Prior,
            sample_mode: SampleMode::Argmax,
            tau: 1.0,
            duration: forced.map_or(DurationMode::Mean, DurationMode::Forced),
            rollout: RolloutMode::FreeRunning,
        }
    }
}

/// Result of one unrolled pass.
pub struct ModelRun {
    /// `predictions[s - 1]` is the `[node_rows, 4]` prediction of state `s`.
    pub predictions: Vec<Var>,
    /// Per-edge-row schedule with the chosen type of every segment.
    pub schedule: SegmentSchedule,
    /// Summed over segments, edges and samples (scalar), if evaluated.
    pub kl_duration: Option<Var>,
    pub kl_edge: Option<Var>,
    /// Summed negative log-likelihood of states `t_obs..T` (scalar).
    pub recon: Var,
    /// `step_types[s - t_obs][row]`: argmax type of the edge sample the
    /// decoder consumed when predicting state `s`.
    pub step_types: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: RelationalEncoder,
    pub durations: DurationHead,
    pub edges: EdgeHeads,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.encoder_hidden;
        let feedback = if config.edge_feedback { config.edge_types } else { 0 };
        let encoder = RelationalEncoder::new(store, h, feedback, rng);
        let mut durations = DurationHead::new(store, h, config.duration_variant, rng);
        durations.prior_mu0 = config.prior_mu0;
        durations.prior_sigma0 = config.prior_sigma0;
        durations.d_min = config.d_min;
        let edges = EdgeHeads::new(store, h, config.edge_types, rng);
        let decoder = Decoder::new(store, config.decoder_hidden, config.edge_types, config.out_variance, rng);
        Ok(Model {
            config: config.clone(),
            encoder,
            durations,
            edges,
            decoder,
        })
    }

    /// Unrolls the model over `steps` (ground-truth node states, one
    /// `[n_frames * n_agents, 4]` constant per time step).
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &FrameGraph,
        steps: &[Var],
        rng: &mut Rng,
        opts: &RunOptions,
    ) -> Result<ModelRun> {
        let horizon = steps.len();
        let t_obs = opts.t_obs;
        if t_obs == 0 || t_obs >= horizon {
            return Err(Error::contract(format!(
                "need 0 < t_obs < horizon, got t_obs={t_obs}, horizon={horizon}"
            )));
        }
        if graph.n_agents != self.config.n_agents {
            return Err(Error::contract(format!(
                "model built for {} agents, batch has {}",
                self.config.n_agents, graph.n_agents
            )));
        }
        let rows = graph.edge_rows();
        let e = self.config.edge_types;
        let forced = matches!(opts.duration, DurationMode::Forced(_));
        let teacher = opts.rollout == RolloutMode::TeacherForced;
        let need_reverse = opts.edge_source == EdgeSource::Encoder
            || (!forced && self.durations.variant == DurationVariant::FullTrajectory);

        // Ground-truth embeddings serve the reverse recurrence and, when
        // teacher forcing, the forward one as well.
        let gt_emb = if teacher || need_reverse {
            Some(self.encoder.embed_sequence(tape, p, graph, steps)?)
        } else {
            None
        };
        let h_reverse = match (&gt_emb, need_reverse) {
            (Some(emb), true) => Some(self.encoder.roll_reverse(tape, p, emb)?),
            _ => None,
        };

        let mut fwd: LstmState = self.encoder.forward_cell.zero_state(tape, rows);
        let blank = tape.constant(Tensor::zeros([rows, e]));
        let mut edge_state = blank;
        let mut builder = ScheduleBuilder::new(rows, t_obs, horizon)?;
        let mut kl_d: Option<Var> = None;
        let mut kl_e: Option<Var> = None;
        let mut recon: Option<Var> = None;
        let mut dec_state = self.decoder.zero_state(tape, graph.node_rows());
        let mut input = steps[0];
        let mut predictions = Vec::with_capacity(horizon - 1);
        let mut step_types = Vec::with_capacity(horizon - t_obs);

        for t in 0..horizon - 1 {
            let emb = match (&gt_emb, teacher || t < t_obs) {
                (Some(g), true) => g[t],
                _ => self.encoder.embed_step(tape, p, graph, input)?,
            };
            let feedback = (self.encoder.feedback_dim > 0).then_some(edge_state);
            fwd = self.encoder.forward_step(tape, p, emb, feedback, fwd)?;

            let closing = builder.closing(t);
            if !closing.is_empty() {
                let rem = builder.remaining_after(t);
                let hp = tape.gather_rows(fwd.h, &closing)?;
                let hr = match &h_reverse {
                    Some(r) => Some(tape.gather_rows(r[t], &closing)?),
                    None => None,
                };
                let (mu_v, sigma_v) = if forced {
                    let nan = vec![f64::NAN; closing.len()];
                    (nan.clone(), nan)
                } else {
                    let inp = self.durations.input(tape, hp, hr)?;
                    let (mu, sigma) = self.durations.duration_posterior(tape, p, inp)?;
                    let kl = duration_kl(tape, mu, sigma, self.durations.prior_mu0, self.durations.prior_sigma0)?;
                    let kl = tape.sum_all(kl);
                    kl_d = Some(accumulate(tape, kl_d, kl)?);
                    (values(tape, mu), values(tape, sigma))
                };
                let draws = draw_durations(&mu_v, &sigma_v, rem, self.durations.d_min, opts.duration, rng);

                let prior = self.edges.prior_logits(tape, p, hp)?;
                let logits = match opts.edge_source {
                    EdgeSource::Prior => prior,
                    EdgeSource::Encoder => {
                        let hr = hr.ok_or_else(|| Error::contract("encoder edges need reverse states"))?;
                        let enc = self.edges.encoder_logits(tape, p, hr, hp)?;
                        let kl = edge_kl(tape, enc, prior)?;
                        let kl = tape.sum_all(kl);
                        kl_e = Some(accumulate(tape, kl_e, kl)?);
                        enc
                    }
                };
                let sample = sample_edges(tape, rng, logits, opts.tau, opts.sample_mode)?;
                let types = argmax_rows(tape.value(sample));
                edge_state = tape.replace_rows(edge_state, &closing, sample)?;
                for (k, &row) in closing.iter().enumerate() {
                    let (z, d) = draws[k];
                    builder.open(row, t, d, z, mu_v[k], sigma_v[k], Some(types[k]));
                }
            }

            let s = t + 1;
            let edges = (s >= t_obs).then_some(edge_state);
            if s >= t_obs {
                step_types.push(argmax_rows(tape.value(edge_state)));
            }
            let (pred, next) = self.decoder.decode_step(tape, p, graph, input, dec_state, edges)?;
            dec_state = next;
            predictions.push(pred);
            if s >= t_obs {
                let term = nll(tape, pred, steps[s], self.decoder.out_variance)?;
                recon = Some(accumulate(tape, recon, term)?);
            }
            input = if teacher || s < t_obs { steps[s] } else { pred };
        }

        debug_assert!(builder.is_complete());
        let recon = recon.expect("at least one predicted step");
        Ok(ModelRun {
            predictions,
            schedule: builder.finish(),
            kl_duration: kl_d,
            kl_edge: kl_e,
            recon,
            step_types,
        })
    }
}

fn accumulate<T: Scalar>(tape: &mut Tape<T>, acc: Option<Var>, term: Var) -> Result<Var> {
    match acc {
        Some(a) => tape.add(a, term),
        None => Ok(term),
    }
}

/// Per-step node states for the samples `indices`: one `[len * n_agents, 4]`
/// tensor per time step.
pub fn step_tensors<T: Scalar>(batch: &TrajectoryBatch, indices: &[usize]) -> Vec<Tensor<T>> {
    let n = batch.n_agents;
    (0..batch.horizon)
        .map(|t| {
            let mut data = Vec::with_capacity(indices.len() * n * STATE_DIM);
            for &s in indices {
                for a in 0..n {
                    data.extend(batch.state(s, t, a).iter().map(|&v| T::lit(v as f64)));
                }
            }
            Tensor::new(vec![indices.len() * n, STATE_DIM], data).expect("consistent batch")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn tiny() -> (ModelConfig, TrajectoryBatch) {
        let cfg = ModelConfig {
            encoder_hidden: 8,
            decoder_hidden: 8,
            ..ModelConfig::default()
        };
        let sim = SimConfig {
            n_samples: 4,
            horizon: 10,
            ..SimConfig::default()
        };
        (cfg, simulate(&sim).unwrap().normalized())
    }

    fn unroll(
        cfg: &ModelConfig,
        data: &TrajectoryBatch,
        opts: &RunOptions,
        poison_after: Option<usize>,
    ) -> (Vec<Vec<f64>>, SegmentSchedule) {
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&mut store, cfg, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let idx: Vec<usize> = (0..data.n_samples).collect();
        let graph = FrameGraph::new(idx.len(), data.n_agents);
        let mut tensors = step_tensors::<f64>(data, &idx);
        if let Some(t0) = poison_after {
            for t in &mut tensors[t0..] {
                t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
        let steps: Vec<Var> = tensors.into_iter().map(|t| tape.constant(t)).collect();
        let run = model.run(&mut tape, &p, &graph, &steps, &mut Rng::new(7), opts).unwrap();
        let preds = run.predictions.iter().map(|&v| values(&tape, v)).collect();
        (preds, run.schedule)
    }

    #[test]
    fn schedules_tile_the_window() {
        let (cfg, data) = tiny();
        let (_, sched) = unroll(&cfg, &data, &RunOptions::training(3, 0.5, DurationMode::Sample), None);
        sched.validate(1).unwrap();
        assert_eq!(sched.edges.len(), 4 * 6);
        assert!(sched.edges.iter().flatten().all(|s| s.edge_type.is_some()));
    }

    #[test]
    fn free_running_ignores_ground_truth_after_burn_in() {
        let (cfg, data) = tiny();
        let opts = RunOptions::inference(4, None);
        let (clean, s1) = unroll(&cfg, &data, &opts, None);
        let (poisoned, s2) = unroll(&cfg, &data, &opts, Some(4));
        assert_eq!(clean, poisoned);
        assert_eq!(s1, s2);
        assert!(clean.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn first_free_step_matches_teacher_forcing() {
        let (cfg, data) = tiny();
        let free = RunOptions::inference(4, None);
        let forced = RunOptions {
            rollout: RolloutMode::TeacherForced,
            ..free
        };
        let (a, _) = unroll(&cfg, &data, &free, None);
        let (b, _) = unroll(&cfg, &data, &forced, None);
        assert_eq!(a[..4], b[..4]);
        assert_ne!(a[5], b[5]);
    }

    #[test]
    fn forced_unit_durations_give_per_step_segments() {
        let (cfg, data) = tiny();
        let (_, sched) = unroll(&cfg, &data, &RunOptions::training(3, 0.5, DurationMode::Forced(1)), None);
        assert!(sched.edges.iter().all(|s| s.len() == 7));
        assert_eq!(sched.mean_segments(), 7.0);
    }

    #[test]
    fn full_trajectory_variant_runs_at_inference() {
        let (mut cfg, data) = tiny();
        cfg.duration_variant = DurationVariant::FullTrajectory;
        cfg.edge_feedback = true;
        let (preds, sched) = unroll(&cfg, &data, &RunOptions::inference(3, None), None);
        sched.validate(1).unwrap();
        assert_eq!(preds.len(), 9);
    }
}
