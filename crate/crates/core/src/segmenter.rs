//! Duration encoder and segment schedules.
//!
//! Each directed edge's prediction window `[t_obs, horizon)` is tiled by
//! segments. When a segment closes at step `t` (its last step), the state at
//! `t` yields a Gaussian over the fraction `z_d` of the remaining window the
//! next segment occupies; the realised integer duration is
//! `clamp(round_half_up(z_d * t_remaining), d_min, t_remaining)`.

use serde::{Deserialize, Serialize};

use crate::encoder::EdgeEmbeddings;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Bound, Mlp, ParamStore, Rng, Scalar, Tape, Var};

/// Which recurrent states condition the duration posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationVariant {
    /// Forward (causal) state only.
    #[default]
    PastOnly,
    /// `[reverse, forward]` states, i.e. the whole trajectory.
    FullTrajectory,
}

/// How a duration is drawn from its posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DurationMode {
    /// Reparametrised sample `mu + sigma * eps`.
    Sample,
    /// Posterior mean (`eps = 0`).
    Mean,
    /// Every segment lasts this many steps (clamped to the remainder); the
    /// duration posterior is not evaluated.
    Forced(usize),
}

#[derive(Clone, Debug)]
pub struct DurationHead {
    pub f_mu: Mlp,
    pub f_sigma: Mlp,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
    pub d_min: usize,
    pub variant: DurationVariant,
}

impl DurationHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        hidden: usize,
        variant: DurationVariant,
        rng: &mut Rng,
    ) -> Self {
        let input = match variant {
            DurationVariant::PastOnly => hidden,
            DurationVariant::FullTrajectory => 2 * hidden,
        };
        DurationHead {
            f_mu: Mlp::new(store, "duration.f_mu", &[input, hidden, 1], Activation::Elu, false, rng),
            f_sigma: Mlp::new(
                store,
                "duration.f_sigma",
                &[input, hidden, 1],
                Activation::Elu,
                false,
                rng,
            ),
            prior_mu0: 0.0,
            prior_sigma0: 1.0,
            d_min: 1,
            variant,
        }
    }

    /// Input rows for the heads: the forward state, or `[reverse, forward]`.
    pub fn input<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h_prior: Var,
        h_reverse: Option<Var>,
    ) -> Result<Var> {
        match (self.variant, h_reverse) {
            (DurationVariant::PastOnly, _) => Ok(h_prior),
            (DurationVariant::FullTrajectory, Some(r)) => tape.concat_cols(&[r, h_prior]),
            (DurationVariant::FullTrajectory, None) => Err(Error::contract(
                "full-trajectory duration posterior needs reverse states",
            )),
        }
    }

    /// `mu = tanh(f_mu(h))`, `sigma = sigmoid(f_sigma(h))`, both `[rows, 1]`.
    pub fn duration_posterior<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        h_state: Var,
    ) -> Result<(Var, Var)> {
        let m = self.f_mu.forward(tape, p, h_state)?;
        let mu = tape.tanh(m)?;
        let s = self.f_sigma.forward(tape, p, h_state)?;
        let sigma = tape.sigmoid(s)?;
        Ok((mu, sigma))
    }
}

/// Integer duration of the next segment.
pub fn realize_duration(z_d: f64, t_remaining: usize, d_min: usize) -> usize {
    assert!(t_remaining >= 1, "realize_duration needs a non-empty remainder");
    let d_min = d_min.clamp(1, t_remaining);
    if z_d.is_nan() {
        return d_min;
    }
    let raw = (z_d * t_remaining as f64 + 0.5).floor();
    if raw <= d_min as f64 {
        d_min
    } else if raw >= t_remaining as f64 {
        t_remaining
    } else {
        raw as usize
    }
}

/// Closed-form `KL(N(mu, sigma^2) || N(mu0, sigma0^2))`, row-wise.
pub fn duration_kl<T: Scalar>(
    tape: &mut Tape<T>,
    mu: Var,
    sigma: Var,
    prior_mu0: f64,
    prior_sigma0: f64,
) -> Result<Var> {
    // log(s0) - log(s) + (s^2 + (mu - mu0)^2) / (2 s0^2) - 1/2
    let log_s = tape.log(sigma)?;
    let s2 = tape.square(sigma)?;
    let dm = tape.affine(mu, 1.0, -prior_mu0);
    let dm2 = tape.square(dm)?;
    let num = tape.add(s2, dm2)?;
    let quad = tape.scale(num, 1.0 / (2.0 * prior_sigma0 * prior_sigma0));
    let diff = tape.sub(quad, log_s)?;
    Ok(tape.affine(diff, 1.0, prior_sigma0.ln() - 0.5))
}

/// Scalar form of [`duration_kl`].
pub fn duration_kl_value(mu: f64, sigma: f64, prior_mu0: f64, prior_sigma0: f64) -> f64 {
    (prior_sigma0 / sigma).ln() + (sigma * sigma + (mu - prior_mu0).powi(2))
        / (2.0 * prior_sigma0 * prior_sigma0)
        - 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: usize,
    pub duration: usize,
    pub z_d: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Edge type decided for this segment, once edge inference has run.
    pub edge_type: Option<usize>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.t_start + self.duration
    }
}

/// Per-edge segment lists tiling `[t_obs, horizon)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    pub edges: Vec<Vec<Segment>>,
    pub t_obs: usize,
    pub horizon: usize,
}

impl SegmentSchedule {
    pub fn validate(&self, d_min: usize) -> Result<()> {
        for (e, segs) in self.edges.iter().enumerate() {
            let mut t = self.t_obs;
            for s in segs {
                if s.t_start != t {
                    return Err(Error::contract(format!(
                        "edge {e}: segment starts at {} but coverage ends at {t}",
                        s.t_start
                    )));
                }
                if s.duration < d_min.max(1) {
                    return Err(Error::contract(format!(
                        "edge {e}: duration {} below minimum",
                        s.duration
                    )));
                }
                t = s.end();
            }
            if t != self.horizon {
                return Err(Error::contract(format!(
                    "edge {e}: coverage ends at {t}, expected {}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    /// Index of the segment of `edge` containing step `t`.
    pub fn segment_at(&self, edge: usize, t: usize) -> Option<usize> {
        self.edges[edge]
            .iter()
            .position(|s| (s.t_start..s.end()).contains(&t))
    }

    /// Per-step edge types over `[t_obs, horizon)`.
    pub fn expand_types(&self, edge: usize) -> Vec<Option<usize>> {
        self.edges[edge]
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.edge_type, s.duration))
            .collect()
    }

    pub fn mean_segments(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(Vec::len).sum::<usize>() as f64 / self.edges.len() as f64
    }
}

/// Incremental schedule construction shared by the training and inference
/// paths.
#[derive(Clone, Debug)]
pub struct ScheduleBuilder {
    t_obs: usize,
    horizon: usize,
    next_close: Vec<Option<usize>>,
    edges: Vec<Vec<Segment>>,
}

impl ScheduleBuilder {
    pub fn new(rows: usize, t_obs: usize, horizon: usize) -> Result<Self> {
        if t_obs == 0 || t_obs >= horizon {
            return Err(Error::contract(format!(
                "need 0 < t_obs < horizon, got t_obs={t_obs}, horizon={horizon}"
            )));
        }
        Ok(ScheduleBuilder {
            t_obs,
            horizon,
            next_close: vec![Some(t_obs - 1); rows],
            edges: vec![Vec::new(); rows],
        })
    }

    /// Rows whose current segment (or the burn-in) ends at step `t`.
    pub fn closing(&self, t: usize) -> Vec<usize> {
        self.next_close
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Some(t))
            .map(|(r, _)| r)
            .collect()
    }

    /// Steps left after closing at `t`.
    pub fn remaining_after(&self, t: usize) -> usize {
        self.horizon - (t + 1)
    }

    /// Opens the segment following step `t` on `row`.
    pub fn open(
        &mut self,
        row: usize,
        t: usize,
        duration: usize,
        z_d: f64,
        mu: f64,
        sigma: f64,
        edge_type: Option<usize>,
    ) {
        debug_assert_eq!(self.next_close[row], Some(t));
        let start = t + 1;
        let duration = duration.clamp(1, self.horizon - start);
        self.edges[row].push(Segment {
            t_start: start,
            duration,
            z_d,
            mu,
            sigma,
            edge_type,
        });
        let end = start + duration;
        self.next_close[row] = if end >= self.horizon { None } else { Some(end - 1) };
    }

    pub fn is_complete(&self) -> bool {
        self.next_close.iter().all(Option::is_none)
    }

    pub fn finish(self) -> SegmentSchedule {
        SegmentSchedule {
            edges: self.edges,
            t_obs: self.t_obs,
            horizon: self.horizon,
        }
    }
}

/// Draws `mu + sigma * eps` (or the mean) for each row and realises it.
/// Returns `(z_d, duration)` per row.
pub fn draw_durations(
    mu: &[f64],
    sigma: &[f64],
    t_remaining: usize,
    d_min: usize,
    mode: DurationMode,
    rng: &mut Rng,
) -> Vec<(f64, usize)> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| match mode {
            DurationMode::Forced(d) => (f64::NAN, d.clamp(1, t_remaining)),
            DurationMode::Mean => (m, realize_duration(m, t_remaining, d_min)),
            DurationMode::Sample => {
                let z = m + s * rng.normal();
                (z, realize_duration(z, t_remaining, d_min))
            }
        })
        .collect()
}

/// Output of [`build_schedule`]: the schedule plus the per-segment posterior
/// parameters on the tape (absent when durations are forced).
pub struct ScheduleDraw {
    pub schedule: SegmentSchedule,
    pub posteriors: Vec<(Var, Var)>,
}

/// Builds per-edge schedules from precomputed recurrent states, reading the
/// state at the last step of each closing segment.
pub fn build_schedule<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    head: &DurationHead,
    states: &EdgeEmbeddings,
    t_obs: usize,
    horizon: usize,
    rng: &mut Rng,
    mode: DurationMode,
) -> Result<ScheduleDraw> {
    if states.h_prior.len() < horizon.saturating_sub(1) {
        return Err(Error::contract(format!(
            "need states for {} steps, have {}",
            horizon - 1,
            states.h_prior.len()
        )));
    }
    let rows = tape.value(states.h_prior[0]).rows();
    let mut builder = ScheduleBuilder::new(rows, t_obs, horizon)?;
    let mut posteriors = Vec::new();
    for t in t_obs - 1..horizon - 1 {
        let closing = builder.closing(t);
        if closing.is_empty() {
            continue;
        }
        let rem = builder.remaining_after(t);
        let (mu_v, sigma_v) = if let DurationMode::Forced(_) = mode {
            let nan = vec![f64::NAN; closing.len()];
            (nan.clone(), nan)
        } else {
            let hp = tape.gather_rows(states.h_prior[t], &closing)?;
            let hr = match states.h_reverse.get(t) {
                Some(&r) => Some(tape.gather_rows(r, &closing)?),
                None => None,
            };
            let input = head.input(tape, hp, hr)?;
            let (mu, sigma) = head.duration_posterior(tape, p, input)?;
            posteriors.push((mu, sigma));
            (values(tape, mu), values(tape, sigma))
        };
        let draws = draw_durations(&mu_v, &sigma_v, rem, head.d_min, mode, rng);
        for (k, &row) in closing.iter().enumerate() {
            let (z, d) = draws[k];
            builder.open(row, t, d, z, mu_v[k], sigma_v[k], None);
        }
    }
    debug_assert!(builder.is_complete());
    Ok(ScheduleDraw {
        schedule: builder.finish(),
        posteriors,
    })
}

pub(crate) fn values<T: Scalar>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v)
        .data()
        .iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN))
        .collect()
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Rng, Tensor};
    use proptest::prelude::*;

    #[test]
    fn realize_examples() {
        assert_eq!(realize_duration(1.0, 45, 1), 45);
        assert_eq!(realize_duration(-0.3, 45, 1), 1);
        // 22.5 rounds half-up
        assert_eq!(realize_duration(0.5, 45, 1), 23);
        assert_eq!(realize_duration(7.0, 45, 1), 45);
        assert_eq!(realize_duration(f64::NAN, 45, 1), 1);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(duration_kl_value(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!((duration_kl_value(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::from_f64([2, 1], &[0.0, 1.0]).unwrap());
        let s = tape.constant(Tensor::from_f64([2, 1], &[1.0, 1.0]).unwrap());
        let kl = duration_kl(&mut tape, mu, s, 0.0, 1.0).unwrap();
        let v = tape.value(kl).data();
        assert!(v[0].abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_mean_zero_sigma_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let head = DurationHead::new(&mut store, 4, DurationVariant::PastOnly, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let h = tape.constant(Tensor::full([3, 4], 0.7));
        let (mu, sigma) = head.duration_posterior(&mut tape, &p, h).unwrap();
        assert!(tape.value(mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(sigma).data().iter().all(|&v| v == 0.5));
    }

    fn run_builder(t_obs: usize, horizon: usize, rows: usize, mut z: impl FnMut() -> f64) -> SegmentSchedule {
        let mut b = ScheduleBuilder::new(rows, t_obs, horizon).unwrap();
        for t in t_obs - 1..horizon - 1 {
            for row in b.closing(t) {
                let zv = z();
                let d = realize_duration(zv, b.remaining_after(t), 1);
                b.open(row, t, d, zv, 0.0, 1.0, None);
            }
        }
        assert!(b.is_complete());
        b.finish()
    }

    #[test]
    fn full_duration_is_single_segment() {
        let s = run_builder(5, 50, 6, || 1.0);
        s.validate(1).unwrap();
        for segs in &s.edges {
            assert_eq!(segs.len(), 1);
            assert_eq!((segs[0].t_start, segs[0].duration), (5, 45));
        }
    }

    #[test]
    fn unit_durations_are_per_step() {
        let s = run_builder(5, 50, 6, || 0.0);
        s.validate(1).unwrap();
        for segs in &s.edges {
            assert_eq!(segs.len(), 45);
            assert!(segs.iter().all(|s| s.duration == 1));
        }
        assert_eq!(s.mean_segments(), 45.0);
    }

    #[test]
    fn bad_window_rejected() {
        assert!(ScheduleBuilder::new(1, 0, 10).is_err());
        assert!(ScheduleBuilder::new(1, 10, 10).is_err());
    }

    proptest! {
        #[test]
        fn schedules_tile_window(seed in any::<u64>(), t_obs in 1usize..20, extra in 1usize..60) {
            let horizon = t_obs + extra;
            let mut rng = Rng::new(seed);
            let s = run_builder(t_obs, horizon, 3, || rng.normal());
            prop_assert!(s.validate(1).is_ok());
        }
    }
}
