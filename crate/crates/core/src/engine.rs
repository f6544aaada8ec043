//! Video inference with keyframe scheduling and common-feature reuse.
//!
//! Keyframes run the full network and publish their common feature into a
//! two-slot cache. Every other frame runs only the shallow encoder and is
//! decoded against the cached feature of the previous keyframe (mode P), or
//! against both neighbouring keyframes with the logits averaged (mode B).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::model::{crop, pad_to_multiple, Model, INPUT_MULTIPLE};
use crate::tensor::{argmax_channels, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fixed,
    /// Adaptive keyframe selection on mean absolute frame difference.
    #[serde(alias = "aks")]
    Adaptive,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Policy::Fixed),
            "adaptive" | "aks" => Ok(Policy::Adaptive),
            _ => Err(Error::Config(format!("unknown policy {s:?} (fixed|aks)"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Fixed => "fixed",
            Policy::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    /// Average of the previous and the next keyframe's predictions.
    B,
    /// Previous keyframe only.
    P,
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" => Ok(MergeMode::B),
            "P" | "p" => Ok(MergeMode::P),
            _ => Err(Error::Config(format!("unknown mode {s:?} (P|B)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub policy: Policy,
    /// Keyframe interval of the fixed policy.
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    /// Minimum keyframe interval of the adaptive policy.
    pub min_k: usize,
    /// Adaptive threshold on the mean absolute difference, in pixel units.
    #[serde(rename = "S", alias = "threshold")]
    pub threshold: f64,
    pub first_key: usize,
    pub mode: MergeMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            policy: Policy::Fixed,
            k: 2,
            min_k: 1,
            threshold: 10.0,
            first_key: 0,
            mode: MergeMode::B,
        }
    }
}

impl ScheduleConfig {
    pub fn fixed(k: usize, mode: MergeMode) -> Self {
        ScheduleConfig {
            k,
            mode,
            ..Default::default()
        }
    }

    pub fn adaptive(min_k: usize, threshold: f64, mode: MergeMode) -> Self {
        ScheduleConfig {
            policy: Policy::Adaptive,
            min_k,
            threshold,
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.min_k == 0 {
            return Err(Error::Config("K and min_k must be at least 1".into()));
        }
        if self.threshold.is_nan() {
            return Err(Error::Config("S must not be NaN".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference over all elements.
pub fn frame_score<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "frame_score operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Next adaptive keyframe after `t_p`: the first index at least `min_k`
/// ahead whose score against frame `t_p` exceeds `threshold`, or the last
/// frame if the scan runs off the end. `None` when fewer than `min_k`
/// frames follow `t_p`; those frames reuse keyframe `t_p`.
pub fn next_keyframe_index<T: Scalar>(
    frames: &[Tensor<T>],
    t_p: usize,
    min_k: usize,
    threshold: f64,
) -> Result<Option<usize>> {
    let n = frames.len();
    if min_k == 0 {
        return Err(Error::InvalidArgument("min_k must be at least 1".into()));
    }
    let mut t_s = t_p + min_k;
    if t_s >= n {
        return Ok(None);
    }
    while t_s < n - 1 && frame_score(&frames[t_s], &frames[t_p])? <= threshold {
        t_s += 1;
    }
    Ok(Some(t_s.min(n - 1)))
}

/// Keyframe indices of a clip of `frames`, ascending.
pub fn keyframe_schedule<T: Scalar>(
    frames: &[Tensor<T>],
    cfg: &ScheduleConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = frames.len();
    if cfg.first_key >= n {
        return Err(Error::Config(format!(
            "first_key {} out of range for {n} frames",
            cfg.first_key
        )));
    }
    Ok(match cfg.policy {
        Policy::Fixed => (cfg.first_key..n).step_by(cfg.k).collect(),
        Policy::Adaptive => {
            let mut keys = vec![cfg.first_key];
            while let Some(t) =
                next_keyframe_index(frames, *keys.last().unwrap(), cfg.min_k, cfg.threshold)?
            {
                keys.push(t);
            }
            keys
        }
    })
}

/// Elementwise `(a + b) / 2`.
pub fn merge_predictions<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "merge operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let half = T::lit(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x + y) * half)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// The two most recent keyframe common features.
#[derive(Clone, Debug, Default)]
pub struct KeyframeCache<T> {
    prev: Option<(usize, Tensor<T>)>,
    next: Option<(usize, Tensor<T>)>,
}

impl<T: Scalar> KeyframeCache<T> {
    /// Stores a new keyframe feature; the previous newest moves to the older slot.
    pub fn publish(&mut self, index: usize, common: Tensor<T>) {
        if let Some((t, _)) = &self.next {
            assert!(index > *t, "keyframes must be published in order");
        }
        self.prev = self.next.take();
        self.next = Some((index, common));
    }

    pub fn t_p(&self) -> Option<usize> {
        self.prev.as_ref().map(|p| p.0)
    }

    pub fn t_s(&self) -> Option<usize> {
        self.next.as_ref().map(|p| p.0)
    }

    pub fn f_p(&self) -> Option<&Tensor<T>> {
        self.prev.as_ref().map(|p| &p.1)
    }

    pub fn f_s(&self) -> Option<&Tensor<T>> {
        self.next.as_ref().map(|p| &p.1)
    }
}

/// How a frame's prediction was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrameSource {
    Key,
    /// Decoded against keyframe `prev`, keyframe `next`, or both (averaged).
    Nonkey {
        prev: Option<usize>,
        next: Option<usize>,
    },
}

/// Wall time of one frame split by stage, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub index: usize,
    pub is_key: bool,
    pub enc_lo_ms: f64,
    pub enc_hi_ms: f64,
    pub fuse_decode_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub keyframe_indices: Vec<usize>,
    pub frame_timings: Vec<FrameTiming>,
    pub t_k_mean: f64,
    /// `None` when every frame is a keyframe.
    pub t_n_mean: Option<f64>,
    pub avg_ms_per_frame: f64,
    pub latency_ms: f64,
}

/// `((k - 1) t_n + t_k) / k`.
pub fn average_time_per_frame(t_k: f64, t_n: f64, k: f64) -> f64 {
    ((k - 1.0) * t_n + t_k) / k
}

/// Worst-case wait for a frame's output. Mode P waits at most one keyframe;
/// mode B also waits for the next keyframe and the queued non-key frames.
pub fn latency_model(t_k: f64, t_n: f64, k: f64, mode: MergeMode) -> f64 {
    match mode {
        MergeMode::P => t_k,
        MergeMode::B => t_k + (k - 1.0).max(0.0) * t_n,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Summary timings of a run. The fixed policy uses the closed form for the
/// average; the adaptive policy uses the empirical mean and its mean
/// keyframe interval as `K` in the latency model.
pub fn latency_report(
    timings: &[FrameTiming],
    keyframe_indices: &[usize],
    cfg: &ScheduleConfig,
) -> EngineReport {
    let t_k = mean(timings.iter().filter(|t| t.is_key).map(|t| t.total_ms)).unwrap_or(0.0);
    let t_n = mean(timings.iter().filter(|t| !t.is_key).map(|t| t.total_ms));
    let empirical = mean(timings.iter().map(|t| t.total_ms)).unwrap_or(0.0);
    let k = match cfg.policy {
        Policy::Fixed => cfg.k as f64,
        Policy::Adaptive => timings.len() as f64 / keyframe_indices.len().max(1) as f64,
    };
    let avg = match (cfg.policy, t_n) {
        (Policy::Fixed, Some(t_n)) => average_time_per_frame(t_k, t_n, k),
        (Policy::Fixed, None) if cfg.k == 1 => t_k,
        _ => empirical,
    };
    EngineReport {
        keyframe_indices: keyframe_indices.to_vec(),
        frame_timings: timings.to_vec(),
        t_k_mean: t_k,
        t_n_mean: t_n,
        avg_ms_per_frame: avg,
        latency_ms: latency_model(t_k, t_n.unwrap_or(0.0), k, cfg.mode),
    }
}

/// Per-frame outputs of a run.
#[derive(Clone, Debug)]
pub struct VideoOutput {
    pub predictions: Vec<LabelMap>,
    /// `[num_classes,H,W]` logits at input resolution.
    pub logits: Vec<Tensor<f32>>,
    pub sources: Vec<FrameSource>,
    /// Common feature of every keyframe.
    pub key_commons: BTreeMap<usize, Tensor<f32>>,
    pub report: EngineReport,
}

/// Machine-readable summary of a run, written as `run_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub keyframe_indices: Vec<usize>,
    pub t_k_mean: f64,
    pub t_n_mean: Option<f64>,
    pub avg_ms_per_frame: f64,
    pub latency_ms: f64,
    pub policy: Policy,
    #[serde(rename = "K")]
    pub k: usize,
    pub min_k: usize,
    #[serde(rename = "S")]
    pub threshold: f64,
    pub mode: MergeMode,
}

impl RunReport {
    pub fn new(report: &EngineReport, cfg: &ScheduleConfig) -> Self {
        RunReport {
            keyframe_indices: report.keyframe_indices.clone(),
            t_k_mean: report.t_k_mean,
            t_n_mean: report.t_n_mean,
            avg_ms_per_frame: report.avg_ms_per_frame,
            latency_ms: report.latency_ms,
            policy: cfg.policy,
            k: cfg.k,
            min_k: cfg.min_k,
            threshold: cfg.threshold,
            mode: cfg.mode,
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct FrameResult {
    logits: Tensor<f32>,
    timing: FrameTiming,
}

fn check_frames(frames: &[Tensor<f32>]) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("clip has no frames".into()))?;
    let (_, h, w) = first.dims3()?;
    if let Some((i, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.shape() != first.shape())
    {
        return Err(Error::Shape(format!(
            "frame {i} has shape {:?}, frame 0 has {:?}",
            f.shape(),
            first.shape()
        )));
    }
    Ok((h, w))
}

fn run_key(
    model: &Model<f32>,
    index: usize,
    frame: &Tensor<f32>,
) -> Result<(FrameResult, Tensor<f32>)> {
    let (_, h, w) = frame.dims3()?;
    let start = Instant::now();
    let padded = pad_to_multiple(frame, INPUT_MULTIPLE)?;
    let raw = model.enc_lo(&padded)?;
    let indep = model.normalize(&raw)?;
    let enc_lo_ms = ms_since(start);
    let t = Instant::now();
    let common = model.extract_common(&raw)?;
    let enc_hi_ms = ms_since(t);
    let t = Instant::now();
    let (_, full) = model.predict_with_common(&common, &indep)?;
    let logits = crop(&full, h, w)?;
    let fuse_decode_ms = ms_since(t);
    let timing = FrameTiming {
        index,
        is_key: true,
        enc_lo_ms,
        enc_hi_ms,
        fuse_decode_ms,
        total_ms: ms_since(start),
    };
    Ok((FrameResult { logits, timing }, common))
}

fn run_nonkey(
    model: &Model<f32>,
    index: usize,
    frame: &Tensor<f32>,
    prev: Option<&Tensor<f32>>,
    next: Option<&Tensor<f32>>,
) -> Result<FrameResult> {
    let (_, h, w) = frame.dims3()?;
    let start = Instant::now();
    let padded = pad_to_multiple(frame, INPUT_MULTIPLE)?;
    let indep = model.independent_feature(&padded)?;
    let enc_lo_ms = ms_since(start);
    let t = Instant::now();
    let full = match (prev, next) {
        (Some(a), Some(b)) => {
            let (_, fa) = model.predict_with_common(a, &indep)?;
            let (_, fb) = model.predict_with_common(b, &indep)?;
            merge_predictions(&fa, &fb)?
        }
        (Some(c), None) | (None, Some(c)) => model.predict_with_common(c, &indep)?.1,
        (None, None) => unreachable!("non-key frame {index} has no keyframe to decode against"),
    };
    let logits = crop(&full, h, w)?;
    let fuse_decode_ms = ms_since(t);
    let timing = FrameTiming {
        index,
        is_key: false,
        enc_lo_ms,
        enc_hi_ms: 0.0,
        fuse_decode_ms,
        total_ms: ms_since(start),
    };
    Ok(FrameResult { logits, timing })
}

/// Keyframes each non-key frame is decoded against: the nearest earlier and
/// later keyframes, reduced to one side per `mode` and at the clip ends.
pub fn frame_sources(n: usize, keys: &[usize], mode: MergeMode) -> Vec<FrameSource> {
    (0..n)
        .map(|j| {
            if keys.binary_search(&j).is_ok() {
                return FrameSource::Key;
            }
            let prev = keys.iter().rev().find(|&&k| k < j).copied();
            let next = keys.iter().find(|&&k| k > j).copied();
            match (mode, prev, next) {
                (MergeMode::P, Some(p), _) => FrameSource::Nonkey {
                    prev: Some(p),
                    next: None,
                },
                _ => FrameSource::Nonkey { prev, next },
            }
        })
        .collect()
}

fn assemble(
    cfg: &ScheduleConfig,
    keys: Vec<usize>,
    sources: Vec<FrameSource>,
    results: Vec<FrameResult>,
    key_commons: BTreeMap<usize, Tensor<f32>>,
) -> Result<VideoOutput> {
    let mut predictions = Vec::with_capacity(results.len());
    let mut logits = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (_, h, w) = r.logits.dims3()?;
        predictions.push(LabelMap::new(h, w, argmax_channels(&r.logits)?)?);
        logits.push(r.logits);
        timings.push(r.timing);
    }
    let report = latency_report(&timings, &keys, cfg);
    Ok(VideoOutput {
        predictions,
        logits,
        sources,
        key_commons,
        report,
    })
}

/// Reference single-threaded inference over a clip.
///
/// Keyframes are processed in order; after each one is published, the
/// non-key frames preceding it are emitted, so in mode B every intermediate
/// frame waits for its next keyframe. Frames after the last keyframe use
/// the last keyframe only.
pub fn run_video(
    model: &Model<f32>,
    frames: &[Tensor<f32>],
    cfg: &ScheduleConfig,
) -> Result<VideoOutput> {
    check_frames(frames)?;
    let n = frames.len();
    let keys = keyframe_schedule(frames, cfg)?;
    let mut slots: Vec<Option<FrameResult>> = (0..n).map(|_| None).collect();
    let mut sources = vec![FrameSource::Key; n];
    let mut key_commons = BTreeMap::new();
    let mut cache = KeyframeCache::default();
    let mut emitted = 0;
    let mut emit_pending = |upto: usize,
                            cache: &KeyframeCache<f32>,
                            trailing: bool,
                            slots: &mut Vec<Option<FrameResult>>,
                            sources: &mut Vec<FrameSource>|
     -> Result<()> {
        for j in emitted..upto {
            if slots[j].is_some() {
                continue;
            }
            let (prev, next) = if trailing {
                (cache.next.as_ref(), None)
            } else {
                match (cfg.mode, cache.prev.as_ref()) {
                    (_, None) => (None, cache.next.as_ref()),
                    (MergeMode::P, Some(p)) => (Some(p), None),
                    (MergeMode::B, Some(p)) => (Some(p), cache.next.as_ref()),
                }
            };
            sources[j] = FrameSource::Nonkey {
                prev: prev.map(|p| p.0),
                next: next.map(|p| p.0),
            };
            slots[j] = Some(run_nonkey(
                model,
                j,
                &frames[j],
                prev.map(|p| &p.1),
                next.map(|p| &p.1),
            )?);
        }
        emitted = upto;
        Ok(())
    };
    for &t in &keys {
        let (result, common) = run_key(model, t, &frames[t])?;
        slots[t] = Some(result);
        key_commons.insert(t, common.clone());
        cache.publish(t, common);
        emit_pending(t, &cache, false, &mut slots, &mut sources)?;
    }
    emit_pending(n, &cache, true, &mut slots, &mut sources)?;
    debug_assert_eq!(sources, frame_sources(n, &keys, cfg.mode));
    let results = slots
        .into_iter()
        .map(|s| s.expect("every frame emitted"))
        .collect();
    assemble(cfg, keys, sources, results, key_commons)
}

/// Same outputs as [`run_video`], with keyframes and then non-key frames
/// each processed in parallel. Per-frame timings overlap and are only
/// indicative.
pub fn run_video_pipelined(
    model: &Model<f32>,
    frames: &[Tensor<f32>],
    cfg: &ScheduleConfig,
) -> Result<VideoOutput> {
    check_frames(frames)?;
    let n = frames.len();
    let keys = keyframe_schedule(frames, cfg)?;
    let sources = frame_sources(n, &keys, cfg.mode);
    let key_results: Vec<(FrameResult, Tensor<f32>)> = keys
        .par_iter()
        .map(|&t| run_key(model, t, &frames[t]))
        .collect::<Result<_>>()?;
    let mut key_commons = BTreeMap::new();
    let mut slots: Vec<Option<FrameResult>> = (0..n).map(|_| None).collect();
    for (&t, (result, common)) in keys.iter().zip(key_results) {
        slots[t] = Some(result);
        key_commons.insert(t, common);
    }
    let nonkey: Vec<(usize, FrameResult)> = sources
        .par_iter()
        .enumerate()
        .filter_map(|(j, s)| match *s {
            FrameSource::Key => None,
            FrameSource::Nonkey { prev, next } => Some((j, prev, next)),
        })
        .map(|(j, prev, next)| {
            let pick = |k: Option<usize>| k.map(|k| &key_commons[&k]);
            run_nonkey(model, j, &frames[j], pick(prev), pick(next)).map(|r| (j, r))
        })
        .collect::<Result<_>>()?;
    for (j, r) in nonkey {
        slots[j] = Some(r);
    }
    let results = slots
        .into_iter()
        .map(|s| s.expect("every frame processed"))
        .collect();
    assemble(cfg, keys, sources, results, key_commons)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs the reference path `reps` times and reports per-frame, per-stage
/// median timings.
pub fn bench(
    model: &Model<f32>,
    frames: &[Tensor<f32>],
    cfg: &ScheduleConfig,
    reps: usize,
) -> Result<EngineReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let runs: Vec<EngineReport> = (0..reps)
        .map(|_| run_video(model, frames, cfg).map(|o| o.report))
        .collect::<Result<_>>()?;
    let keys = runs[0].keyframe_indices.clone();
    let timings: Vec<FrameTiming> = (0..frames.len())
        .map(|i| {
            let pick = |f: fn(&FrameTiming) -> f64| {
                let mut v: Vec<f64> = runs.iter().map(|r| f(&r.frame_timings[i])).collect();
                median(&mut v)
            };
            FrameTiming {
                index: i,
                is_key: runs[0].frame_timings[i].is_key,
                enc_lo_ms: pick(|t| t.enc_lo_ms),
                enc_hi_ms: pick(|t| t.enc_hi_ms),
                fuse_decode_ms: pick(|t| t.fuse_decode_ms),
                total_ms: pick(|t| t.total_ms),
            }
        })
        .collect();
    Ok(latency_report(&timings, &keys, cfg))
}

/// Keyframe-path prediction for every frame.
pub fn predict_all_keyframes(model: &Model<f32>, frames: &[Tensor<f32>]) -> Result<Vec<LabelMap>> {
    frames
        .iter()
        .map(|f| {
            let (_, h, w) = f.dims3()?;
            let out = model.keyframe_forward(&pad_to_multiple(f, INPUT_MULTIPLE)?)?;
            LabelMap::new(h, w, argmax_channels(&crop(&out.full, h, w)?)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(values: &[f32]) -> Vec<Tensor<f32>> {
        values.iter().map(|&v| Tensor::full([1, 2, 2], v)).collect()
    }

    #[test]
    fn score_of_constant_frames() {
        let f = frames(&[0.0, 10.0]);
        assert_eq!(frame_score(&f[0], &f[1]).unwrap(), 10.0);
        assert_eq!(frame_score(&f[1], &f[1]).unwrap(), 0.0);
        assert!(frame_score(&f[0], &Tensor::<f32>::zeros([1, 2, 3])).is_err());
    }

    #[test]
    fn adaptive_threshold_extremes() {
        let f = frames(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(next_keyframe_index(&f, 0, 2, -1.0).unwrap(), Some(2));
        assert_eq!(next_keyframe_index(&f, 0, 2, 255.0).unwrap(), Some(6));
        assert_eq!(next_keyframe_index(&f, 4, 2, -1.0).unwrap(), Some(6));
        assert_eq!(next_keyframe_index(&f, 5, 3, -1.0).unwrap(), None);
        assert_eq!(next_keyframe_index(&f, 6, 1, -1.0).unwrap(), None);
        let cfg = ScheduleConfig::adaptive(2, -1.0, MergeMode::B);
        assert_eq!(keyframe_schedule(&f, &cfg).unwrap(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn abrupt_change_triggers_keyframe() {
        let mut v = vec![50.0; 7];
        v.extend([200.0; 5]);
        let f = frames(&v);
        assert_eq!(next_keyframe_index(&f, 0, 1, 75.0).unwrap(), Some(7));
    }

    #[test]
    fn fixed_schedule_and_sources() {
        let f = frames(&[0.0; 10]);
        let keys = keyframe_schedule(&f, &ScheduleConfig::fixed(3, MergeMode::B)).unwrap();
        assert_eq!(keys, vec![0, 3, 6, 9]);
        let b = frame_sources(10, &keys, MergeMode::B);
        assert_eq!(
            b[4],
            FrameSource::Nonkey {
                prev: Some(3),
                next: Some(6)
            }
        );
        let p = frame_sources(10, &keys, MergeMode::P);
        assert_eq!(
            p[4],
            FrameSource::Nonkey {
                prev: Some(3),
                next: None
            }
        );
        let late = frame_sources(5, &[2], MergeMode::P);
        assert_eq!(
            late[0],
            FrameSource::Nonkey {
                prev: None,
                next: Some(2)
            }
        );
        assert_eq!(
            late[4],
            FrameSource::Nonkey {
                prev: Some(2),
                next: None
            }
        );
    }

    #[test]
    fn merge_is_exact_half() {
        let a = Tensor::full([2, 2], 0.2f64);
        let b = Tensor::full([2, 2], 0.6f64);
        assert!(merge_predictions(&a, &b)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(merge_predictions(&a, &a).unwrap().data(), a.data());
    }

    #[test]
    fn timing_model() {
        assert_eq!(average_time_per_frame(70.0, 5.0, 10.0), 11.5);
        assert_eq!(average_time_per_frame(70.0, 5.0, 1.0), 70.0);
        for k in 1..20 {
            let k = k as f64;
            assert!(
                latency_model(70.0, 5.0, k, MergeMode::B)
                    >= latency_model(70.0, 5.0, k, MergeMode::P)
            );
        }
    }

    #[test]
    fn cache_slots_shift() {
        let mut c = KeyframeCache::default();
        c.publish(0, Tensor::full([1], 1.0f32));
        assert_eq!((c.t_p(), c.t_s()), (None, Some(0)));
        c.publish(4, Tensor::full([1], 2.0f32));
        assert_eq!((c.t_p(), c.t_s()), (Some(0), Some(4)));
        assert_eq!(c.f_p().unwrap().data(), &[1.0]);
    }
}
