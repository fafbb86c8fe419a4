//! Synthetic particle system with switching ground-truth interactions, and
//! the on-disk trajectory dataset format.
//!
//! All agents but the last drift at constant velocity. The last agent (the
//! "pushed" particle) receives a repulsive kick from every other agent closer
//! than the interaction radius, and both directed edges of such a pair are
//! labelled as interacting for that step.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Per-agent state: `(px, py, vx, vy)`.
pub const STATE_DIM: usize = 4;

pub const DATASET_FORMAT: &str = "dider-trajectories";
pub const DATASET_VERSION: u32 = 1;
const STATES_FILE: &str = "states.f32";
const EDGES_FILE: &str = "edges.u8";
const MANIFEST_FILE: &str = "manifest.json";

/// Squared distances below this are clamped in the force law.
const MIN_DIST_SQ: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_agents: usize,
    pub horizon: usize,
    pub n_samples: usize,
    pub dt: f64,
    pub interaction_radius: f64,
    pub repulsion_strength: f64,
    pub init_speed_range: [f64; 2],
    /// Initial positions are uniform in `[-init_box, init_box]^2`.
    pub init_box: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_agents: 3,
            horizon: 50,
            n_samples: 40_000,
            dt: 0.1,
            interaction_radius: 1.0,
            repulsion_strength: 0.1,
            init_speed_range: [0.1, 0.5],
            init_box: 1.5,
            seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("invalid simulation config: {m}")));
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if self.horizon < 2 {
            return bad("horizon must be >= 2");
        }
        if self.n_agents < 2 {
            return bad("n_agents must be >= 2");
        }
        if !(self.interaction_radius > 0.0) {
            return bad("interaction_radius must be > 0");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        let [lo, hi] = self.init_speed_range;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("init_speed_range must satisfy 0 <= min <= max");
        }
        if !(self.init_box >= 0.0) {
            return bad("init_box must be >= 0");
        }
        Ok(())
    }
}

/// All ordered pairs `(i, j)`, `i != j`, in lexicographic order.
pub fn edge_pairs(n_agents: usize) -> Vec<(usize, usize)> {
    (0..n_agents)
        .flat_map(|i| (0..n_agents).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Position of the directed edge `i -> j` in [`edge_pairs`] order.
pub fn edge_index(i: usize, j: usize, n_agents: usize) -> usize {
    assert!(i != j && i < n_agents && j < n_agents);
    i * (n_agents - 1) + if j > i { j - 1 } else { j }
}

/// Affine map between physical units and the stored, normalised units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pos_mean: [f64; 2],
    pub pos_scale: f64,
    pub vel_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub n_samples: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub feature_dim: usize,
    pub edge_types: usize,
    /// Row-major `[S, T, N, 4]`.
    pub states: Vec<f32>,
    /// Row-major `[S, T, N*(N-1)]`, 0 = no interaction.
    pub edge_labels: Option<Vec<u8>>,
    pub normalization: Option<Normalization>,
}

impl TrajectoryBatch {
    pub fn n_edges(&self) -> usize {
        self.n_agents * (self.n_agents - 1)
    }

    fn sample_len(&self) -> usize {
        self.horizon * self.n_agents * self.feature_dim
    }

    pub fn state(&self, s: usize, t: usize, agent: usize) -> &[f32] {
        let off = ((s * self.horizon + t) * self.n_agents + agent) * self.feature_dim;
        &self.states[off..off + self.feature_dim]
    }

    pub fn label(&self, s: usize, t: usize, edge: usize) -> Option<u8> {
        self.edge_labels
            .as_ref()
            .map(|l| l[(s * self.horizon + t) * self.n_edges() + edge])
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TrajectoryBatch {
        let sl = self.sample_len();
        let el = self.horizon * self.n_edges();
        let states = indices
            .iter()
            .flat_map(|&s| self.states[s * sl..(s + 1) * sl].iter().copied())
            .collect();
        let edge_labels = self.edge_labels.as_ref().map(|l| {
            indices
                .iter()
                .flat_map(|&s| l[s * el..(s + 1) * el].iter().copied())
                .collect()
        });
        TrajectoryBatch {
            n_samples: indices.len(),
            states,
            edge_labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> TrajectoryBatch {
        TrajectoryBatch {
            n_samples: 0,
            horizon: self.horizon,
            n_agents: self.n_agents,
            feature_dim: self.feature_dim,
            edge_types: self.edge_types,
            states: Vec::new(),
            edge_labels: None,
            normalization: self.normalization.clone(),
        }
    }

    /// Normalises positions to zero mean and unit standard deviation and
    /// velocities to unit standard deviation, recording the statistics.
    pub fn normalized(&self) -> TrajectoryBatch {
        let stats = self.statistics();
        self.normalized_with(&stats)
    }

    /// Position mean and scales of this (unnormalised) batch.
    pub fn statistics(&self) -> Normalization {
        let n = (self.states.len() / self.feature_dim).max(1) as f64;
        let mut mean = [0.0f64; 2];
        for st in self.states.chunks(self.feature_dim) {
            mean[0] += st[0] as f64;
            mean[1] += st[1] as f64;
        }
        mean[0] /= n;
        mean[1] /= n;
        let (mut pv, mut vv) = (0.0f64, 0.0f64);
        for st in self.states.chunks(self.feature_dim) {
            pv += (st[0] as f64 - mean[0]).powi(2) + (st[1] as f64 - mean[1]).powi(2);
            vv += (st[2] as f64).powi(2) + (st[3] as f64).powi(2);
        }
        Normalization {
            pos_mean: mean,
            pos_scale: (pv / (2.0 * n)).sqrt().max(1e-12),
            vel_scale: (vv / (2.0 * n)).sqrt().max(1e-12),
        }
    }

    /// Applies given statistics to an unnormalised batch.
    pub fn normalized_with(&self, norm: &Normalization) -> TrajectoryBatch {
        assert!(self.normalization.is_none(), "batch already normalised");
        let mut out = self.clone();
        for st in out.states.chunks_mut(self.feature_dim) {
            st[0] = ((st[0] as f64 - norm.pos_mean[0]) / norm.pos_scale) as f32;
            st[1] = ((st[1] as f64 - norm.pos_mean[1]) / norm.pos_scale) as f32;
            st[2] = (st[2] as f64 / norm.vel_scale) as f32;
            st[3] = (st[3] as f64 / norm.vel_scale) as f32;
        }
        out.normalization = Some(norm.clone());
        out
    }

    /// States converted back to physical units (identity when the batch was
    /// never normalised).
    pub fn physical_states(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.states.iter().map(|&v| v as f64).collect();
        if let Some(n) = &self.normalization {
            for st in out.chunks_mut(self.feature_dim) {
                st[0] = st[0] * n.pos_scale + n.pos_mean[0];
                st[1] = st[1] * n.pos_scale + n.pos_mean[1];
                st[2] *= n.vel_scale;
                st[3] *= n.vel_scale;
            }
        }
        out
    }
}

/// Initial `(position, velocity)` of every agent.
pub type InitialState = Vec<([f64; 2], [f64; 2])>;

fn random_initial(config: &SimConfig, rng: &mut Rng) -> InitialState {
    let b = config.init_box;
    let [lo, hi] = config.init_speed_range;
    (0..config.n_agents)
        .map(|_| {
            let p = [rng.uniform_range(-b, b), rng.uniform_range(-b, b)];
            let speed = rng.uniform_range(lo, hi);
            let heading = rng.uniform_range(0.0, std::f64::consts::TAU);
            (p, [speed * heading.cos(), speed * heading.sin()])
        })
        .collect()
}

/// Integrates one sample from a given initial state. Returns states
/// `[T, N, 4]` and labels `[T, N*(N-1)]`.
///
/// Semi-implicit Euler: positions advance with the previous velocity, then
/// the pushed particle's velocity takes the kick evaluated at the new
/// positions, so `p[t+1] - p[t] = dt * v[t]` and the label at step `t`
/// describes the kick already contained in `v[t]`.
pub fn simulate_sample(config: &SimConfig, init: &InitialState) -> (Vec<f64>, Vec<u8>) {
    let n = config.n_agents;
    let pushed = n - 1;
    let ne = n * (n - 1);
    let r2 = config.interaction_radius * config.interaction_radius;
    let mut pos: Vec<[f64; 2]> = init.iter().map(|s| s.0).collect();
    let mut vel: Vec<[f64; 2]> = init.iter().map(|s| s.1).collect();
    let mut states = Vec::with_capacity(config.horizon * n * STATE_DIM);
    let mut labels = vec![0u8; config.horizon * ne];
    for t in 0..config.horizon {
        if t > 0 {
            for (p, v) in pos.iter_mut().zip(&vel) {
                p[0] += config.dt * v[0];
                p[1] += config.dt * v[1];
            }
        }
        let mut acc = [0.0f64; 2];
        for i in 0..pushed {
            let d = [pos[pushed][0] - pos[i][0], pos[pushed][1] - pos[i][1]];
            let dist2 = d[0] * d[0] + d[1] * d[1];
            if dist2 < r2 {
                let denom = dist2.max(MIN_DIST_SQ);
                acc[0] += config.repulsion_strength * d[0] / denom;
                acc[1] += config.repulsion_strength * d[1] / denom;
                labels[t * ne + edge_index(i, pushed, n)] = 1;
                labels[t * ne + edge_index(pushed, i, n)] = 1;
            }
        }
        vel[pushed][0] += config.dt * acc[0];
        vel[pushed][1] += config.dt * acc[1];
        for (p, v) in pos.iter().zip(&vel) {
            states.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
        }
    }
    (states, labels)
}

/// Generates `config.n_samples` trajectories in physical units. Sample `k`
/// draws from its own stream derived from `(config.seed, k)`, so the output
/// does not depend on thread scheduling.
pub fn simulate(config: &SimConfig) -> Result<TrajectoryBatch> {
    config.validate()?;
    let per_sample: Vec<(Vec<f64>, Vec<u8>)> = (0..config.n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = Rng::derive(config.seed, &[k as u64]);
            let init = random_initial(config, &mut rng);
            simulate_sample(config, &init)
        })
        .collect();
    let mut states = Vec::with_capacity(config.n_samples * config.horizon * config.n_agents * 4);
    let mut labels = Vec::new();
    for (s, l) in per_sample {
        states.extend(s.into_iter().map(|v| v as f32));
        labels.extend(l);
    }
    Ok(TrajectoryBatch {
        n_samples: config.n_samples,
        horizon: config.horizon,
        n_agents: config.n_agents,
        feature_dim: STATE_DIM,
        edge_types: 2,
        states,
        edge_labels: Some(labels),
        normalization: None,
    })
}

/// Order-preserving split into train/val/test by sample index.
pub fn split(
    batch: &TrajectoryBatch,
    fractions: [f64; 3],
) -> Result<(TrajectoryBatch, TrajectoryBatch, TrajectoryBatch)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::contract(format!(
            "split fractions must lie in [0, 1], got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let s = batch.n_samples;
    let n_train = ((fractions[0] * s as f64).round() as usize).min(s);
    let n_val = ((fractions[1] * s as f64).round() as usize).min(s - n_train);
    let idx: Vec<usize> = (0..s).collect();
    Ok((
        batch.select(&idx[..n_train]),
        batch.select(&idx[n_train..n_train + n_val]),
        batch.select(&idx[n_train + n_val..]),
    ))
}

// ---------------------------------------------------------------------------
// dataset directory

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadInfo {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub split: String,
    pub n_samples: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub feature_dim: usize,
    pub edge_types: usize,
    pub states: PayloadInfo,
    pub edges: Option<PayloadInfo>,
    pub normalization: Option<Normalization>,
    pub seed: Option<u64>,
    pub generator: Option<SimConfig>,
}

impl DatasetManifest {
    pub fn describe(batch: &TrajectoryBatch, split: &str, generator: Option<&SimConfig>) -> Self {
        let s = batch.n_samples;
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            endianness: "little".into(),
            split: split.into(),
            n_samples: s,
            horizon: batch.horizon,
            n_agents: batch.n_agents,
            feature_dim: batch.feature_dim,
            edge_types: batch.edge_types,
            states: PayloadInfo {
                file: STATES_FILE.into(),
                dtype: "f32".into(),
                shape: vec![s, batch.horizon, batch.n_agents, batch.feature_dim],
            },
            edges: batch.edge_labels.as_ref().map(|_| PayloadInfo {
                file: EDGES_FILE.into(),
                dtype: "u8".into(),
                shape: vec![s, batch.horizon, batch.n_edges()],
            }),
            normalization: batch.normalization.clone(),
            seed: generator.map(|g| g.seed),
            generator: generator.cloned(),
        }
    }
}

/// Writes `manifest.json`, `states.f32` and (when labelled) `edges.u8`.
pub fn write_dataset(
    batch: &TrajectoryBatch,
    dir: &Path,
    split: &str,
    generator: Option<&SimConfig>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest::describe(batch, split, generator);
    let mut bytes = Vec::with_capacity(batch.states.len() * 4);
    for v in &batch.states {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(STATES_FILE), bytes)?;
    match &batch.edge_labels {
        Some(labels) => fs::write(dir.join(EDGES_FILE), labels)?,
        None => {
            let stale = dir.join(EDGES_FILE);
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
    }
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::CorruptDataset(format!("cannot read {}: {e}", path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptDataset(format!("{}: {e}", path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::CorruptDataset(format!(
            "unknown dataset format {:?}",
            manifest.format
        )));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    if manifest.endianness != "little" {
        return Err(Error::CorruptDataset(format!(
            "unsupported endianness {:?}",
            manifest.endianness
        )));
    }
    Ok(manifest)
}

fn read_payload(dir: &Path, info: &PayloadInfo, elem: usize) -> Result<Vec<u8>> {
    let path = dir.join(&info.file);
    let bytes = fs::read(&path)
        .map_err(|e| Error::CorruptDataset(format!("cannot read {}: {e}", path.display())))?;
    let expected = info.shape.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::CorruptDataset(format!(
            "{}: manifest shape {:?} implies {expected} bytes but the file has {} bytes",
            info.file,
            info.shape,
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn read_dataset(dir: &Path) -> Result<TrajectoryBatch> {
    let m = read_manifest(dir)?;
    let expect_states = [m.n_samples, m.horizon, m.n_agents, m.feature_dim];
    if m.states.shape != expect_states || m.states.dtype != "f32" {
        return Err(Error::CorruptDataset(format!(
            "states payload {:?} ({}) disagrees with header {:?}",
            m.states.shape, m.states.dtype, expect_states
        )));
    }
    if m.n_agents < 1 || m.feature_dim != STATE_DIM {
        return Err(Error::CorruptDataset(format!(
            "expected feature_dim {STATE_DIM}, found {}",
            m.feature_dim
        )));
    }
    let raw = read_payload(dir, &m.states, 4)?;
    let states = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let edge_labels = match &m.edges {
        Some(info) => {
            let ne = m.n_agents * m.n_agents.saturating_sub(1);
            if info.shape != [m.n_samples, m.horizon, ne] || info.dtype != "u8" {
                return Err(Error::CorruptDataset(format!(
                    "edge payload {:?} disagrees with header",
                    info.shape
                )));
            }
            let labels = read_payload(dir, info, 1)?;
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= m.edge_types) {
                return Err(Error::CorruptDataset(format!(
                    "edge label {bad} outside 0..{}",
                    m.edge_types
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Ok(TrajectoryBatch {
        n_samples: m.n_samples,
        horizon: m.horizon,
        n_agents: m.n_agents,
        feature_dim: m.feature_dim,
        edge_types: m.edge_types,
        states,
        edge_labels,
        normalization: m.normalization,
    })
}
