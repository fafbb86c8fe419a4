//! Capacity-weighted ELBO, Adam, the epoch loop and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edges::SampleMode;
use crate::encoder::FrameGraph;
use crate::error::{Error, Result};
use crate::evaluation::{forecast_mse, ForecastOptions};
use crate::model::{step_tensors, Model, ModelConfig, ModelRun, RunOptions};
use crate::numeric::{Bound, ParamStore, Rng, RngState, Scalar, Tape, Tensor, Var};
use crate::segmenter::{DurationMode, DurationVariant};
use crate::sim::{Normalization, TrajectoryBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Dider,
    /// Duration posterior conditioned on the whole trajectory.
    DiderSkidDuration,
    /// Per-step edges: every segment lasts one step.
    DnriBaseline,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dider" => Ok(TrainMode::Dider),
            "dider-skid" | "dider_skid" | "dider_skid_duration" => Ok(TrainMode::DiderSkidDuration),
            "dnri" | "dnri_baseline" => Ok(TrainMode::DnriBaseline),
            other => Err(Error::contract(format!(
                "unknown mode {other:?} (expected dnri, dider or dider-skid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Forces every segment to this many steps.
    pub force_duration: Option<usize>,
    pub edge_feedback: bool,
    pub beta_d: f64,
    pub beta_e: f64,
    pub cap_d: f64,
    pub cap_e: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub t_obs: usize,
    pub tau: f64,
    /// Straight-through one-hot edge samples instead of relaxed ones.
    pub hard_samples: bool,
    pub edge_types: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub out_variance: f64,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
    /// Train/validation/test fractions of the dataset.
    pub split: [f64; 3],
    /// Validation samples used for model selection (0 = all).
    pub val_samples: usize,
    /// Horizon of the selection MSE (0 = middle of the prediction window).
    pub selection_horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Dider,
            force_duration: None,
            edge_feedback: false,
            beta_d: 1.0,
            beta_e: 1.0,
            cap_d: 0.0,
            cap_e: 0.0,
            learning_rate: 5e-4,
            epochs: 30,
            batch_size: 128,
            seed: 42,
            t_obs: 5,
            tau: 0.5,
            hard_samples: false,
            edge_types: 2,
            encoder_hidden: 64,
            decoder_hidden: 64,
            out_variance: 5e-5,
            prior_mu0: 0.0,
            prior_sigma0: 1.0,
            split: [0.8, 0.1, 0.1],
            val_samples: 500,
            selection_horizon: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.beta_d < 0.0 || self.beta_e < 0.0 {
            return bad("beta_d and beta_e must be non-negative".into());
        }
        if self.cap_d < 0.0 || self.cap_e < 0.0 {
            return bad("cap_d and cap_e must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.t_obs == 0 {
            return bad("t_obs must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.force_duration == Some(0) {
            return bad("force_duration must be at least 1".into());
        }
        self.model_config(2).validate()
    }

    pub fn model_config(&self, n_agents: usize) -> ModelConfig {
        ModelConfig {
            n_agents,
            edge_types: self.edge_types,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            duration_variant: match self.mode {
                TrainMode::DiderSkidDuration => DurationVariant::FullTrajectory,
                _ => DurationVariant::PastOnly,
            },
            edge_feedback: self.edge_feedback,
            out_variance: self.out_variance,
            prior_mu0: self.prior_mu0,
            prior_sigma0: self.prior_sigma0,
            d_min: 1,
        }
    }

    /// Forced segment length, if any; the baseline is per-step.
    pub fn forced_duration(&self) -> Option<usize> {
        match self.mode {
            TrainMode::DnriBaseline => Some(1),
            _ => self.force_duration,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        let duration = self.forced_duration().map_or(DurationMode::Sample, DurationMode::Forced);
        RunOptions {
            sample_mode: if self.hard_samples { SampleMode::Hard } else { SampleMode::Soft },
            ..RunOptions::training(self.t_obs, self.tau, duration)
        }
    }

    fn selection_horizon_for(&self, horizon: usize) -> usize {
        let window = horizon.saturating_sub(self.t_obs);
        match self.selection_horizon {
            0 => (window / 2).max(1),
            h => h.min(window),
        }
    }
}

/// Batch-averaged loss terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub recon_nll: f64,
    pub kl_duration: f64,
    pub kl_edge: f64,
    pub total_loss: f64,
    pub n_segments: f64,
}

/// A recorded ELBO evaluation, ready for [`Tape::backward`].
pub struct ElboPass<T: Scalar> {
    pub tape: Tape<T>,
    pub params: Bound,
    pub total: Var,
    pub report: ElboReport,
    pub run: ModelRun,
}

/// `recon + beta_d * |KL_d - C_d| + beta_e * |KL_e - C_e|`, every term
/// averaged over the samples in `indices`.
pub fn elbo<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    data: &TrajectoryBatch,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<ElboPass<T>> {
    if indices.is_empty() {
        return Err(Error::contract("elbo needs at least one sample"));
    }
    if data.horizon < cfg.t_obs + 1 {
        return Err(Error::contract(format!(
            "horizon {} too short for t_obs {}",
            data.horizon, cfg.t_obs
        )));
    }
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let graph = FrameGraph::new(indices.len(), data.n_agents);
    let steps: Vec<Var> = step_tensors::<T>(data, indices)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let run = model.run(&mut tape, &params, &graph, &steps, rng, &cfg.run_options())?;
    let inv_b = 1.0 / indices.len() as f64;
    let recon = tape.scale(run.recon, inv_b);
    let mut total = recon;
    let mut kl_values = [0.0; 2];
    for (k, (kl, beta, cap)) in [
        (run.kl_duration, cfg.beta_d, cfg.cap_d),
        (run.kl_edge, cfg.beta_e, cfg.cap_e),
    ]
    .into_iter()
    .enumerate()
    {
        let term = match kl {
            Some(kl) => {
                let kl = tape.scale(kl, inv_b);
                kl_values[k] = scalar(&tape, kl);
                let shifted = tape.affine(kl, 1.0, -cap);
                let gap = tape.abs(shifted)?;
                tape.scale(gap, beta)
            }
            None => tape.constant(Tensor::scalar(T::lit(beta * cap))),
        };
        total = tape.add(total, term)?;
    }
    let report = ElboReport {
        recon_nll: scalar(&tape, recon),
        kl_duration: kl_values[0],
        kl_edge: kl_values[1],
        total_loss: scalar(&tape, total),
        n_segments: run.schedule.mean_segments(),
    };
    Ok(ElboPass {
        tape,
        params,
        total,
        report,
        run,
    })
}

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// optimiser

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[k]` is the gradient of parameter `k` (`None` when it
    /// took no part in the loss).
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<&[f32]>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[k] else { continue };
            let w = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub recon_nll: f64,
    pub kl_duration: f64,
    pub kl_edge: f64,
    pub n_segments: f64,
    pub val_mse: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,recon_nll,kl_duration,kl_edge,n_segments,val_mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.recon_nll,
            self.kl_duration,
            self.kl_edge,
            self.n_segments,
            self.val_mse.map_or(String::new(), |v| v.to_string())
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::CSV_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_BATCH: u64 = 3;

/// Model, parameters and optimiser state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub best: Option<(usize, f64)>,
    pub normalization: Option<Normalization>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, n_agents: usize, normalization: Option<Normalization>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(config.seed, &[STREAM_INIT]);
        let model = Model::new(&mut store, &config.model_config(n_agents), &mut rng)?;
        let adam = Adam::new(&store, config.learning_rate);
        Ok(Trainer {
            config: config.clone(),
            model,
            store,
            adam,
            epoch: 0,
            history: Vec::new(),
            best: None,
            normalization,
        })
    }

    /// One gradient step on `indices`; `rng` drives all sampling.
    pub fn step(&mut self, data: &TrajectoryBatch, indices: &[usize], rng: &mut Rng) -> Result<ElboReport> {
        let pass = elbo(&self.model, &self.store, data, indices, &self.config, rng)?;
        if !pass.report.total_loss.is_finite() {
            return Err(divergence(&pass.tape, "loss"));
        }
        let grads = pass.tape.backward(pass.total)?;
        let per_param: Vec<Option<&[f32]>> = pass.params.vars().iter().map(|&v| grads.get(v)).collect();
        if let Some(k) = per_param
            .iter()
            .position(|g| g.is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        {
            return Err(Error::Divergence(format!(
                "non-finite gradient for parameter {}",
                self.store.name(self.store.ids().nth(k).expect("index in range"))
            )));
        }
        self.adam.update(&mut self.store, &per_param);
        Ok(pass.report)
    }

    /// Runs one epoch over `train` and, when given, scores `val`.
    pub fn run_epoch(&mut self, train: &TrajectoryBatch, val: Option<&TrajectoryBatch>) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let order = Rng::derive(self.config.seed, &[STREAM_SHUFFLE, epoch as u64]).permutation(train.n_samples);
        let mut sums = ElboReport::default();
        let mut count = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut rng = batch_rng(self.config.seed, epoch, b);
            let r = self.step(train, chunk, &mut rng).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            let w = chunk.len();
            sums.total_loss += r.total_loss * w as f64;
            sums.recon_nll += r.recon_nll * w as f64;
            sums.kl_duration += r.kl_duration * w as f64;
            sums.kl_edge += r.kl_edge * w as f64;
            sums.n_segments += r.n_segments * w as f64;
            count += w;
        }
        let n = count.max(1) as f64;
        let val_mse = match val {
            Some(v) if v.n_samples > 0 => Some(self.validation_mse(v)?),
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            loss: sums.total_loss / n,
            recon_nll: sums.recon_nll / n,
            kl_duration: sums.kl_duration / n,
            kl_edge: sums.kl_edge / n,
            n_segments: sums.n_segments / n,
            val_mse,
        };
        self.epoch += 1;
        if let Some(v) = val_mse {
            if self.best.is_none_or(|(_, b)| v < b) {
                self.best = Some((self.epoch, v));
            }
        }
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Free-running MSE at the selection horizon.
    pub fn validation_mse(&self, val: &TrajectoryBatch) -> Result<f64> {
        let n = match self.config.val_samples {
            0 => val.n_samples,
            k => k.min(val.n_samples),
        };
        let idx: Vec<usize> = (0..n).collect();
        let subset = val.select(&idx);
        let h = self.config.selection_horizon_for(val.horizon);
        let opts = ForecastOptions {
            forced_duration: self.config.forced_duration(),
            ..ForecastOptions::new(self.config.t_obs, self.config.seed)
        };
        let mse = forecast_mse(&self.model, &self.store, &subset, &opts, &[h])?;
        Ok(mse[0])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                train: self.config.clone(),
                model: self.model.config.clone(),
                epoch: self.epoch,
                rng: Rng::derive(self.config.seed, &[STREAM_SHUFFLE, self.epoch as u64]).state(),
                adam_step: self.adam.step,
                best_epoch: self.best.map(|b| b.0),
                best_val_mse: self.best.map(|b| b.1),
                normalization: self.normalization.clone(),
                history: self.history.clone(),
            },
            params: self.store.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let mut trainer = Trainer::new(&h.train, h.model.n_agents, h.normalization.clone())?;
        if trainer.model.config != h.model {
            return Err(Error::CorruptCheckpoint("model configuration does not match training configuration".into()));
        }
        let named: Vec<(String, Tensor<f32>)> = ck.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        trainer.store.load(named)?;
        if ck.adam_m.len() != trainer.store.len() || ck.adam_v.len() != trainer.store.len() {
            return Err(Error::CorruptCheckpoint("optimiser state does not match parameters".into()));
        }
        trainer.adam.m = ck.adam_m.clone();
        trainer.adam.v = ck.adam_v.clone();
        trainer.adam.step = h.adam_step;
        trainer.epoch = h.epoch;
        trainer.history = h.history.clone();
        trainer.best = h.best_epoch.zip(h.best_val_mse);
        Ok(trainer)
    }
}

fn divergence<T: Scalar>(tape: &Tape<T>, what: &str) -> Error {
    match tape.first_non_finite() {
        Some((idx, op, shape)) => Error::Divergence(format!(
            "{what} is not finite; first non-finite tensor is node {idx} ({op}, shape {shape:?})"
        )),
        None => Error::Divergence(format!("{what} is not finite")),
    }
}

/// Where [`train`] writes its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

/// Trains until `trainer.config.epochs` epochs are complete, writing the
/// metrics log and checkpoints after every epoch when `outputs` is given.
pub fn train(
    trainer: &mut Trainer,
    train_set: &TrajectoryBatch,
    val_set: Option<&TrajectoryBatch>,
    outputs: Option<&TrainOutputs>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<()> {
    if let Some(o) = outputs {
        fs::create_dir_all(&o.dir)?;
    }
    while trainer.epoch < trainer.config.epochs {
        let before = trainer.best;
        let m = trainer.run_epoch(train_set, val_set)?;
        progress(&m);
        if let Some(o) = outputs {
            fs::write(o.metrics(), metrics_csv(&trainer.history))?;
            let ck = trainer.checkpoint();
            ck.save(&o.last())?;
            if trainer.best != before || val_set.is_none() {
                ck.save(&o.best())?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint file

const MAGIC: &[u8; 8] = b"DIDERCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub adam_step: u64,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub normalization: Option<Normalization>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (n, t) in self.params.iter() {
            named.push((format!("param/{n}"), t));
        }
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
        for (prefix, set) in [("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (n, t) in names.iter().zip(set) {
                named.push((format!("{prefix}/{n}"), t));
            }
        }
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::CorruptCheckpoint(format!("{name}: implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let raw = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflow")))?;
            let data = r
                .take(raw)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.split_once('/') {
                Some(("param", n)) => {
                    params.add(n, t);
                }
                Some(("adam_m", _)) => adam_m.push(t),
                Some(("adam_v", _)) => adam_v.push(t),
                _ => return Err(Error::CorruptCheckpoint(format!("unexpected tensor {name:?}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model structure and returns it with the stored weights.
    pub fn model(&self) -> Result<(Model, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &self.header.model, &mut Rng::new(0))?;
        let named = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        store.load(named)?;
        Ok((model, store))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// The random stream driving batch `batch` of epoch `epoch`.
pub fn batch_rng(seed: u64, epoch: usize, batch: usize) -> Rng {
    Rng::derive(seed, &[STREAM_BATCH, epoch as u64, batch as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::duration_kl;
    use crate::sim::{simulate, SimConfig};

    fn data(n: usize, seed: u64) -> TrajectoryBatch {
        let sim = SimConfig { n_samples: n, horizon: 12, seed, ..SimConfig::default() };
        simulate(&sim).unwrap().normalized()
    }

    fn small(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            encoder_hidden: 8,
            decoder_hidden: 8,
            batch_size: 4,
            epochs: 2,
            val_samples: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_betas_leave_only_reconstruction() {
        let d = data(4, 1);
        let cfg = TrainConfig { beta_d: 0.0, beta_e: 0.0, cap_d: 3.0, cap_e: 2.0, ..small(TrainMode::Dider) };
        let t = Trainer::new(&cfg, 3, None).unwrap();
        let pass = elbo(&t.model, &t.store, &d, &[0, 1, 2, 3], &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(pass.report.total_loss, pass.report.recon_nll);
        assert!(pass.report.kl_duration >= 0.0 && pass.report.kl_edge >= 0.0);
    }

    #[test]
    fn absent_duration_kl_contributes_its_constant() {
        let d = data(4, 2);
        let cfg = TrainConfig { cap_d: 1.5, ..small(TrainMode::DnriBaseline) };
        let t = Trainer::new(&cfg, 3, None).unwrap();
        let r = elbo(&t.model, &t.store, &d, &[0, 1], &cfg, &mut Rng::new(1)).unwrap().report;
        assert_eq!(r.kl_duration, 0.0);
        let expected = r.recon_nll + 1.5 + (r.kl_edge - cfg.cap_e).abs();
        assert!((r.total_loss - expected).abs() < 1e-3 * expected.abs().max(1.0));
    }

    #[test]
    fn baseline_equals_forced_unit_durations() {
        let d = data(12, 3);
        let mut a = Trainer::new(&small(TrainMode::DnriBaseline), 3, None).unwrap();
        let forced = TrainConfig { force_duration: Some(1), ..small(TrainMode::Dider) };
        let mut b = Trainer::new(&forced, 3, None).unwrap();
        for _ in 0..2 {
            let ma = a.run_epoch(&d, None).unwrap();
            let mb = b.run_epoch(&d, None).unwrap();
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let d = data(16, 4);
        let cfg = TrainConfig { epochs: 6, learning_rate: 3e-3, ..small(TrainMode::Dider) };
        let mut t = Trainer::new(&cfg, 3, None).unwrap();
        train(&mut t, &d, Some(&d), None, |_| {}).unwrap();
        let first = t.history.first().unwrap().recon_nll;
        let last = t.history.last().unwrap().recon_nll;
        assert!(last < first, "{first} -> {last}");
        assert!(t.best.is_some());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let d = data(8, 5);
        let mut t = Trainer::new(&small(TrainMode::Dider), 3, Some(d.statistics())).unwrap();
        t.run_epoch(&d, Some(&d)).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = Trainer::from_checkpoint(&back).unwrap();
        assert_eq!(restored.history, t.history);
        assert_eq!(restored.best, t.best);
        assert_eq!(restored.adam, t.adam);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let t = Trainer::new(&small(TrainMode::Dider), 3, None).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptCheckpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 99;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(12, 6);
        let cfg = TrainConfig { epochs: 3, ..small(TrainMode::Dider) };
        let mut full = Trainer::new(&cfg, 3, None).unwrap();
        train(&mut full, &d, Some(&d), None, |_| {}).unwrap();

        let mut part = Trainer::new(&TrainConfig { epochs: 1, ..cfg.clone() }, 3, None).unwrap();
        train(&mut part, &d, Some(&d), None, |_| {}).unwrap();
        let bytes = part.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.config.epochs = 3;
        train(&mut resumed, &d, Some(&d), None, |_| {}).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.store, full.store);
    }

    #[test]
    fn capacity_pulls_kl_to_target() {
        let mut store = ParamStore::<f32>::new();
        let mu = store.add("mu", Tensor::new([1, 1], vec![0.3]).unwrap());
        let ls = store.add("log_sigma", Tensor::new([1, 1], vec![0.0]).unwrap());
        let mut adam = Adam::new(&store, 0.02);
        let cap = 2.0;
        let mut kl_value = 0.0;
        for _ in 0..1500 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let sigma = tape.exp(p.var(ls)).unwrap();
            let kl = duration_kl(&mut tape, p.var(mu), sigma, 0.0, 1.0).unwrap();
            let kl = tape.sum_all(kl);
            kl_value = tape.value(kl).item() as f64;
            let shifted = tape.affine(kl, 1.0, -cap);
            let loss = tape.abs(shifted).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g: Vec<Option<&[f32]>> = p.vars().iter().map(|&v| grads.get(v)).collect();
            adam.update(&mut store, &g);
        }
        assert!((kl_value - cap).abs() < 0.1 * cap, "kl {kl_value}");
    }
}
