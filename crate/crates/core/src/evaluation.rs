//! Free-running forecasts, horizon MSE, aligned edge accuracy and segment
//! timeline export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameGraph;
use crate::error::{Error, Result};
use crate::model::{step_tensors, Model, RunOptions};
use crate::numeric::{ParamStore, Rng, Tape, Var};
use crate::segmenter::{DurationMode, SegmentSchedule};
use crate::sim::{edge_pairs, TrajectoryBatch, STATE_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOptions {
    pub t_obs: usize,
    pub seed: u64,
    /// Forced segment length (the per-step baseline uses 1).
    pub forced_duration: Option<usize>,
    /// Sample durations from the posterior instead of taking its mean.
    pub sample_durations: bool,
    /// Samples per tape.
    pub chunk_size: usize,
}

impl ForecastOptions {
    pub fn new(t_obs: usize, seed: u64) -> Self {
        ForecastOptions {
            t_obs,
            seed,
            forced_duration: None,
            sample_durations: false,
            chunk_size: 64,
        }
    }

    fn run_options(&self) -> RunOptions {
        let mut opts = RunOptions::inference(self.t_obs, self.forced_duration);
        if self.sample_durations && self.forced_duration.is_none() {
            opts.duration = DurationMode::Sample;
        }
        opts
    }
}

/// Free-running predictions with the schedules and per-step edge types the
/// decoder used.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub n_samples: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub t_obs: usize,
    /// Row-major `[S, T-1, N, 4]`; entry `s - 1` predicts state `s`.
    pub predictions: Vec<f32>,
    /// One schedule per sample, rows indexed like [`edge_pairs`].
    pub schedules: Vec<SegmentSchedule>,
    /// `step_types[sample][s - t_obs][edge]`.
    pub step_types: Vec<Vec<Vec<usize>>>,
}

impl Forecast {
    pub fn prediction(&self, sample: usize, s: usize, agent: usize) -> &[f32] {
        let off = ((sample * (self.horizon - 1) + (s - 1)) * self.n_agents + agent) * STATE_DIM;
        &self.predictions[off..off + STATE_DIM]
    }

    pub fn mean_segments(&self) -> f64 {
        if self.schedules.is_empty() {
            return 0.0;
        }
        self.schedules.iter().map(SegmentSchedule::mean_segments).sum::<f64>() / self.schedules.len() as f64
    }
}

struct ChunkOut {
    predictions: Vec<f32>,
    schedules: Vec<SegmentSchedule>,
    step_types: Vec<Vec<Vec<usize>>>,
}

pub fn forecast(
    model: &Model,
    store: &ParamStore<f32>,
    data: &TrajectoryBatch,
    opts: &ForecastOptions,
) -> Result<Forecast> {
    if opts.t_obs == 0 || opts.t_obs >= data.horizon {
        return Err(Error::contract(format!(
            "burn-in {} must lie strictly inside the horizon {}",
            opts.t_obs, data.horizon
        )));
    }
    let chunk = opts.chunk_size.max(1);
    let idx: Vec<usize> = (0..data.n_samples).collect();
    let run_opts = opts.run_options();
    let e_per = data.n_edges();
    let chunks: Vec<ChunkOut> = idx
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, ids)| -> Result<ChunkOut> {
            let mut tape = Tape::<f32>::new();
            let p = store.bind(&mut tape);
            let graph = FrameGraph::new(ids.len(), data.n_agents);
            let steps: Vec<Var> = step_tensors::<f32>(data, ids).into_iter().map(|t| tape.constant(t)).collect();
            let mut rng = Rng::derive(opts.seed, &[c as u64]);
            let run = model.run(&mut tape, &p, &graph, &steps, &mut rng, &run_opts)?;
            let b = ids.len();
            let stride = data.n_agents * STATE_DIM;
            let mut predictions = vec![0f32; b * (data.horizon - 1) * stride];
            for (k, &v) in run.predictions.iter().enumerate() {
                let vals = tape.value(v).data();
                for f in 0..b {
                    let dst = (f * (data.horizon - 1) + k) * stride;
                    predictions[dst..dst + stride].copy_from_slice(&vals[f * stride..(f + 1) * stride]);
                }
            }
            let schedules = (0..b)
                .map(|f| SegmentSchedule {
                    edges: run.schedule.edges[f * e_per..(f + 1) * e_per].to_vec(),
                    t_obs: run.schedule.t_obs,
                    horizon: run.schedule.horizon,
                })
                .collect();
            let step_types = (0..b)
                .map(|f| {
                    run.step_types
                        .iter()
                        .map(|row| row[f * e_per..(f + 1) * e_per].to_vec())
                        .collect()
                })
                .collect();
            Ok(ChunkOut {
                predictions,
                schedules,
                step_types,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Forecast {
        n_samples: data.n_samples,
        horizon: data.horizon,
        n_agents: data.n_agents,
        t_obs: opts.t_obs,
        predictions: Vec::with_capacity(data.n_samples * (data.horizon - 1) * data.n_agents * STATE_DIM),
        schedules: Vec::with_capacity(data.n_samples),
        step_types: Vec::with_capacity(data.n_samples),
    };
    for c in chunks {
        out.predictions.extend(c.predictions);
        out.schedules.extend(c.schedules);
        out.step_types.extend(c.step_types);
    }
    Ok(out)
}

fn check_horizons(horizons: &[usize], t_obs: usize, horizon: usize) -> Result<()> {
    let max = horizon.saturating_sub(t_obs);
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > max) {
        return Err(Error::contract(format!(
            "prediction horizon {h} outside 1..={max} (trajectory length {horizon}, burn-in {t_obs})"
        )));
    }
    Ok(())
}

/// State predicted at horizon `h`: `t_obs - 1 + h`.
pub fn target_step(t_obs: usize, h: usize) -> usize {
    t_obs - 1 + h
}

/// Mean squared error over samples, agents and all four state dimensions.
pub fn mse_by_horizon(fc: &Forecast, data: &TrajectoryBatch, horizons: &[usize]) -> Result<Vec<f64>> {
    check_horizons(horizons, fc.t_obs, data.horizon)?;
    Ok(horizons
        .iter()
        .map(|&h| {
            let s = target_step(fc.t_obs, h);
            let mut sum = 0.0;
            for n in 0..data.n_samples {
                for a in 0..data.n_agents {
                    for (p, x) in fc.prediction(n, s, a).iter().zip(data.state(n, s, a)) {
                        sum += (*p as f64 - *x as f64).powi(2);
                    }
                }
            }
            sum / (data.n_samples * data.n_agents * STATE_DIM).max(1) as f64
        })
        .collect())
}

/// MSE of predicting the last burn-in state at every horizon.
pub fn zero_delta_mse(data: &TrajectoryBatch, t_obs: usize, horizons: &[usize]) -> Result<Vec<f64>> {
    check_horizons(horizons, t_obs, data.horizon)?;
    Ok(horizons
        .iter()
        .map(|&h| {
            let s = target_step(t_obs, h);
            let mut sum = 0.0;
            for n in 0..data.n_samples {
                for a in 0..data.n_agents {
                    for (p, x) in data.state(n, t_obs - 1, a).iter().zip(data.state(n, s, a)) {
                        sum += (*p as f64 - *x as f64).powi(2);
                    }
                }
            }
            sum / (data.n_samples * data.n_agents * STATE_DIM).max(1) as f64
        })
        .collect())
}

pub fn forecast_mse(
    model: &Model,
    store: &ParamStore<f32>,
    data: &TrajectoryBatch,
    opts: &ForecastOptions,
    horizons: &[usize],
) -> Result<Vec<f64>> {
    check_horizons(horizons, opts.t_obs, data.horizon)?;
    let fc = forecast(model, store, data, opts)?;
    mse_by_horizon(&fc, data, horizons)
}

/// `confusion[true][predicted]` over every edge and step in `[t_obs, T)`,
/// or `None` without labels.
pub fn confusion(fc: &Forecast, data: &TrajectoryBatch, n_types: usize) -> Option<Vec<Vec<u64>>> {
    data.edge_labels.as_ref()?;
    let mut m = vec![vec![0u64; n_types]; n_types.max(data.edge_types)];
    for n in 0..fc.n_samples {
        for (k, types) in fc.step_types[n].iter().enumerate() {
            let s = fc.t_obs + k;
            for (edge, &pred) in types.iter().enumerate() {
                let truth = data.label(n, s, edge).expect("labels present") as usize;
                m[truth][pred] += 1;
            }
        }
    }
    Some(m)
}

/// Permutation `perm[predicted] = aligned` keeping type 0 fixed and
/// maximising the matched counts over the other types (exhaustive).
pub fn align_labels(confusion: &[Vec<u64>]) -> Vec<usize> {
    let e = confusion.first().map_or(0, Vec::len);
    if e <= 2 {
        return (0..e).collect();
    }
    let score = |perm: &[usize]| -> u64 {
        (0..e)
            .map(|pred| confusion.get(perm[pred]).map_or(0, |row| row[pred]))
            .sum()
    };
    let mut rest: Vec<usize> = (1..e).collect();
    let mut best: Vec<usize> = (0..e).collect();
    let mut best_score = score(&best);
    // lexicographic enumeration starting from the identity, strict
    // improvement only, so ties keep the earlier permutation
    loop {
        let Some(i) = (0..rest.len().saturating_sub(1)).rev().find(|&i| rest[i] < rest[i + 1]) else {
            break;
        };
        let j = (i + 1..rest.len()).rev().find(|&j| rest[j] > rest[i]).expect("successor exists");
        rest.swap(i, j);
        rest[i + 1..].reverse();
        let perm: Vec<usize> = std::iter::once(0).chain(rest.iter().copied()).collect();
        let sc = score(&perm);
        if sc > best_score {
            best_score = sc;
            best = perm;
        }
    }
    best
}

/// Applies `perm` to the predicted axis.
pub fn permute_confusion(confusion: &[Vec<u64>], perm: &[usize]) -> Vec<Vec<u64>> {
    let mut out = vec![vec![0u64; confusion[0].len()]; confusion.len()];
    for (t, row) in confusion.iter().enumerate() {
        for (pred, &c) in row.iter().enumerate() {
            out[t][perm[pred]] += c;
        }
    }
    out
}

/// Recall per true type (`None` for types absent from the labels).
pub fn accuracy_by_type(confusion: &[Vec<u64>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row.get(t).copied().unwrap_or(0) as f64 / total as f64)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub forecast: ForecastOptions,
    pub horizons: Vec<usize>,
    /// Frozen alignment; estimated from this data when absent.
    pub permutation: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub t_obs: usize,
    pub horizons: Vec<usize>,
    pub mse_by_horizon: Vec<f64>,
    pub zero_delta_mse_by_horizon: Vec<f64>,
    pub edge_accuracy_by_type: Option<Vec<Option<f64>>>,
    pub mean_edge_accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub permutation: Option<Vec<usize>>,
    pub mean_segments_per_edge: f64,
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    data: &TrajectoryBatch,
    opts: &EvalOptions,
) -> Result<(EvalReport, Forecast)> {
    let t_obs = opts.forecast.t_obs;
    check_horizons(&opts.horizons, t_obs, data.horizon)?;
    let fc = forecast(model, store, data, &opts.forecast)?;
    let report = report_for(&fc, data, model.config.edge_types, opts)?;
    Ok((report, fc))
}

/// Builds the report for an existing forecast.
pub fn report_for(fc: &Forecast, data: &TrajectoryBatch, n_types: usize, opts: &EvalOptions) -> Result<EvalReport> {
    let mse = mse_by_horizon(fc, data, &opts.horizons)?;
    let base = zero_delta_mse(data, fc.t_obs, &opts.horizons)?;
    let raw = confusion(fc, data, n_types);
    let permutation = raw.as_ref().map(|c| opts.permutation.clone().unwrap_or_else(|| align_labels(c)));
    let aligned = raw.as_ref().zip(permutation.as_ref()).map(|(c, p)| permute_confusion(c, p));
    let by_type = aligned.as_ref().map(|c| accuracy_by_type(c));
    let mean = by_type.as_ref().and_then(|acc| {
        let present: Vec<f64> = acc.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    });
    Ok(EvalReport {
        n_samples: data.n_samples,
        t_obs: fc.t_obs,
        horizons: opts.horizons.clone(),
        mse_by_horizon: mse,
        zero_delta_mse_by_horizon: base,
        edge_accuracy_by_type: by_type,
        mean_edge_accuracy: mean,
        confusion: aligned,
        permutation,
        mean_segments_per_edge: fc.mean_segments(),
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}  burn-in: {}", self.n_samples, self.t_obs);
        let _ = writeln!(s, "MSE averaged over agents and all state dimensions (normalised units)");
        let _ = writeln!(s, "{:>8} {:>14} {:>14}", "horizon", "mse", "zero_delta");
        for ((h, m), b) in self.horizons.iter().zip(&self.mse_by_horizon).zip(&self.zero_delta_mse_by_horizon) {
            let _ = writeln!(s, "{h:>8} {m:>14.6e} {b:>14.6e}");
        }
        match &self.edge_accuracy_by_type {
            Some(acc) => {
                let _ = writeln!(s, "edge accuracy (per step, aligned):");
                for (t, a) in acc.iter().enumerate() {
                    match a {
                        Some(a) => {
                            let _ = writeln!(s, "  type {t}: {:.2}%", 100.0 * a);
                        }
                        None => {
                            let _ = writeln!(s, "  type {t}: n/a");
                        }
                    }
                }
                if let Some(m) = self.mean_edge_accuracy {
                    let _ = writeln!(s, "  mean: {:.2}%", 100.0 * m);
                }
                if let Some(p) = &self.permutation {
                    let _ = writeln!(s, "  alignment: {p:?}");
                }
                if let Some(c) = &self.confusion {
                    let _ = writeln!(s, "  confusion (rows true, columns predicted): {c:?}");
                }
            }
            None => {
                let _ = writeln!(s, "edge accuracy: no labels");
            }
        }
        let _ = writeln!(s, "mean segments per edge: {:.3}", self.mean_segments_per_edge);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,key,value\n");
        for (h, m) in self.horizons.iter().zip(&self.mse_by_horizon) {
            let _ = writeln!(s, "mse,{h},{m}");
        }
        for (h, m) in self.horizons.iter().zip(&self.zero_delta_mse_by_horizon) {
            let _ = writeln!(s, "zero_delta_mse,{h},{m}");
        }
        if let Some(acc) = &self.edge_accuracy_by_type {
            for (t, a) in acc.iter().enumerate() {
                let _ = writeln!(s, "edge_accuracy,{t},{}", a.map_or(String::new(), |a| a.to_string()));
            }
        }
        if let Some(m) = self.mean_edge_accuracy {
            let _ = writeln!(s, "mean_edge_accuracy,,{m}");
        }
        let _ = writeln!(s, "mean_segments_per_edge,,{}", self.mean_segments_per_edge);
        s
    }
}

// ---------------------------------------------------------------------------
// timelines

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRecord {
    pub sample_id: usize,
    pub edge_src: usize,
    pub edge_dst: usize,
    pub t_start: usize,
    pub duration: usize,
    pub edge_type: Option<usize>,
}

pub const TIMELINE_HEADER: &str = "sample_id,edge_src,edge_dst,t_start,duration,edge_type";

pub fn timeline_records(schedules: &[SegmentSchedule], n_agents: usize) -> Vec<TimelineRecord> {
    let pairs = edge_pairs(n_agents);
    let mut out = Vec::new();
    for (n, sched) in schedules.iter().enumerate() {
        for (k, segs) in sched.edges.iter().enumerate() {
            let (src, dst) = pairs[k];
            for s in segs {
                out.push(TimelineRecord {
                    sample_id: n,
                    edge_src: src,
                    edge_dst: dst,
                    t_start: s.t_start,
                    duration: s.duration,
                    edge_type: s.edge_type,
                });
            }
        }
    }
    out
}

pub fn timelines_csv(records: &[TimelineRecord]) -> String {
    let mut s = String::from(TIMELINE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.edge_src,
            r.edge_dst,
            r.t_start,
            r.duration,
            r.edge_type.map_or(String::new(), |t| t.to_string())
        );
    }
    s
}

/// Writes the timeline CSV and, when `svg_dir` is given, one SVG per sample
/// (at most `max_svg`).
pub fn export_timelines(
    schedules: &[SegmentSchedule],
    n_agents: usize,
    csv_path: &Path,
    svg_dir: Option<&Path>,
    max_svg: usize,
) -> Result<()> {
    if let Some(parent) = csv_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(csv_path, timelines_csv(&timeline_records(schedules, n_agents)))?;
    if let Some(dir) = svg_dir {
        fs::create_dir_all(dir)?;
        for (n, sched) in schedules.iter().enumerate().take(max_svg) {
            fs::write(dir.join(format!("sample_{n:05}.svg")), timeline_svg(sched, n_agents, n))?;
        }
    }
    Ok(())
}

pub fn read_timelines(path: &Path) -> Result<Vec<TimelineRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TIMELINE_HEADER) {
        return Err(Error::contract(format!("{}: unexpected timeline header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::contract(format!("{}: malformed record on line {}", path.display(), i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(TimelineRecord {
                sample_id: num(f[0])?,
                edge_src: num(f[1])?,
                edge_dst: num(f[2])?,
                t_start: num(f[3])?,
                duration: num(f[4])?,
                edge_type: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}

/// Expands records into `types[sample][s - t_obs][edge]`; steps no record
/// covers stay `None`.
pub fn replay_timelines(
    records: &[TimelineRecord],
    n_samples: usize,
    n_agents: usize,
    t_obs: usize,
    horizon: usize,
) -> Vec<Vec<Vec<Option<usize>>>> {
    let n_edges = n_agents * (n_agents - 1);
    let mut out = vec![vec![vec![None; n_edges]; horizon - t_obs]; n_samples];
    let pairs = edge_pairs(n_agents);
    for r in records {
        let Some(k) = pairs.iter().position(|&p| p == (r.edge_src, r.edge_dst)) else { continue };
        for s in r.t_start..(r.t_start + r.duration).min(horizon) {
            if s >= t_obs && r.sample_id < n_samples {
                out[r.sample_id][s - t_obs][k] = r.edge_type;
            }
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#d9d9d9", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

pub fn timeline_svg(sched: &SegmentSchedule, n_agents: usize, sample_id: usize) -> String {
    let pairs = edge_pairs(n_agents);
    let (px, row_h, left, top) = (12.0, 18.0, 60.0, 24.0);
    let width = left + px * sched.horizon as f64 + 10.0;
    let height = top + row_h * sched.edges.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14">sample {sample_id}</text>"#);
    for (k, segs) in sched.edges.iter().enumerate() {
        let y = top + row_h * k as f64;
        let (i, j) = pairs[k];
        let _ = writeln!(s, r#"<text x="4" y="{}">{i}-&gt;{j}</text>"#, y + 12.0);
        for seg in segs {
            let color = seg.edge_type.map_or("#ffffff", |t| PALETTE[t % PALETTE.len()]);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{}" height="{}" fill="{color}" stroke="black" stroke-width="0.5"><title>type {:?}, t={}..{}</title></rect>"#,
                left + px * seg.t_start as f64,
                px * seg.duration as f64,
                row_h - 4.0,
                seg.edge_type,
                seg.t_start,
                seg.end()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::Segment;

    fn seg(t_start: usize, duration: usize, ty: usize) -> Segment {
        Segment {
            t_start,
            duration,
            z_d: 0.0,
            mu: 0.0,
            sigma: 1.0,
            edge_type: Some(ty),
        }
    }

    #[test]
    fn diagonal_confusion_keeps_identity() {
        let c = vec![vec![5, 1, 0], vec![0, 7, 1], vec![2, 0, 9]];
        assert_eq!(align_labels(&c), vec![0, 1, 2]);
    }

    #[test]
    fn two_types_are_never_permuted() {
        let c = vec![vec![0, 10], vec![10, 0]];
        assert_eq!(align_labels(&c), vec![0, 1]);
    }

    #[test]
    fn swapped_columns_are_recovered() {
        let c = vec![vec![9, 0, 1], vec![0, 1, 8], vec![1, 7, 0]];
        let perm = align_labels(&c);
        assert_eq!(perm, vec![0, 2, 1]);
        let aligned = permute_confusion(&c, &perm);
        assert_eq!(aligned, vec![vec![9, 1, 0], vec![0, 8, 1], vec![1, 0, 7]]);
    }

    #[test]
    fn single_segment_gives_one_record_per_edge() {
        let sched = SegmentSchedule {
            edges: vec![vec![seg(5, 45, 1)]; 6],
            t_obs: 5,
            horizon: 50,
        };
        let recs = timeline_records(std::slice::from_ref(&sched), 3);
        assert_eq!(recs.len(), 6);
        assert_eq!((recs[1].edge_src, recs[1].edge_dst), (0, 2));
        let replay = replay_timelines(&recs, 1, 3, 5, 50);
        assert!(replay[0].iter().flatten().all(|&t| t == Some(1)));
    }

    #[test]
    fn csv_round_trip() {
        let sched = SegmentSchedule {
            edges: vec![vec![seg(2, 1, 0), seg(3, 3, 1)], vec![seg(2, 4, 0)]],
            t_obs: 2,
            horizon: 6,
        };
        let recs = timeline_records(&[sched.clone(), sched], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, timelines_csv(&recs)).unwrap();
        assert_eq!(read_timelines(&path).unwrap(), recs);
    }

    #[test]
    fn relabeling_complements_raw_accuracy() {
        let c = vec![vec![30u64, 10], vec![5, 55]];
        let flipped = permute_confusion(&c, &[1, 0]);
        let a = accuracy_by_type(&c);
        let b = accuracy_by_type(&flipped);
        for t in 0..2 {
            assert!((a[t].unwrap() + b[t].unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_horizon_is_rejected() {
        assert!(check_horizons(&[60], 5, 50).is_err());
        assert!(check_horizons(&[1, 15, 25, 45], 5, 50).is_ok());
        assert!(check_horizons(&[46], 5, 50).is_err());
    }
}
