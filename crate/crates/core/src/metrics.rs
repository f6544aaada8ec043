//! Segmentation accuracy, temporal consistency and feature coherence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Scalar, Tensor};

/// Rows are ground truth, columns are predictions. Ignore pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Row-major counts.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let n = self.num_classes;
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "ground truth class {g} at pixel {i} out of range for {n} classes"
                )));
            }
            if p as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "predicted class {p} at pixel {i} out of range for {n} classes"
                )));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let n = self.num_classes;
        let tp = self.get(c, c);
        let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..n).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// IoU per class; `None` when the class is absent from both ground truth
    /// and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::InvalidArgument("confusion matrix is empty".into()));
        }
        Ok(())
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let ious = self.per_class_iou();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (c, iou) in ious.iter().enumerate() {
            let (tp, _, fn_) = self.tp_fp_fn(c);
            if tp + fn_ > 0 {
                sum += iou.unwrap_or(0.0);
                count += 1;
            }
        }
        Ok(sum / count as f64)
    }

    /// IoU weighted by each class's share of ground-truth pixels.
    pub fn wiou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let total = self.total() as f64;
        let ious = self.per_class_iou();
        Ok((0..self.num_classes)
            .map(|c| {
                let (tp, _, fn_) = self.tp_fp_fn(c);
                (tp + fn_) as f64 / total * ious[c].unwrap_or(0.0)
            })
            .sum())
    }
}

fn check_same_size(maps: &[&LabelMap]) -> Result<(usize, usize)> {
    let (h, w) = (maps[0].height(), maps[0].width());
    if let Some(m) = maps.iter().find(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "label maps differ in size: {h}x{w} vs {}x{}",
            m.height(),
            m.width()
        )));
    }
    Ok((h, w))
}

/// Video consistency over windows of `l` consecutive frames.
///
/// In each window, the reference set holds pixels whose ground-truth class is
/// the same in all `l` frames (ignore pixels excluded). A reference pixel
/// counts as consistent when the prediction is that same class in all `l`
/// frames. The window score is the consistent share of the reference set;
/// windows with an empty reference set are skipped. Returns the mean over
/// scored windows, or `None` if no window had a reference pixel.
pub fn video_consistency(preds: &[LabelMap], gts: &[LabelMap], l: usize) -> Result<Option<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len();
    if l == 0 || l > n {
        return Err(Error::InvalidArgument(format!(
            "window length {l} invalid for {n} frames"
        )));
    }
    let all: Vec<&LabelMap> = preds.iter().chain(gts).collect();
    let (h, w) = check_same_size(&all)?;
    let mut sum = 0.0;
    let mut scored = 0usize;
    for start in 0..=n - l {
        let window = start..start + l;
        let mut stable = 0u64;
        let mut consistent = 0u64;
        for p in 0..h * w {
            let g = gts[start].data()[p];
            if g == IGNORE_LABEL || gts[window.clone()].iter().any(|m| m.data()[p] != g) {
                continue;
            }
            stable += 1;
            if preds[window.clone()].iter().all(|m| m.data()[p] == g) {
                consistent += 1;
            }
        }
        if stable > 0 {
            sum += consistent as f64 / stable as f64;
            scored += 1;
        }
    }
    Ok((scored > 0).then(|| sum / scored as f64))
}

/// Unweighted mean of per-video consistency values.
pub fn mvc(per_video: &[f64]) -> Result<f64> {
    if per_video.is_empty() {
        return Err(Error::InvalidArgument("no videos to average".into()));
    }
    Ok(per_video.iter().sum::<f64>() / per_video.len() as f64)
}

/// Per pixel, the mean cosine similarity between its channel vector and
/// those of its in-bounds 8-neighbours. Zero vectors have similarity 0.
pub fn cosine_similarity_map<T: Scalar>(feature: &Tensor<T>) -> Result<Tensor<f64>> {
    let (c, h, w) = feature.dims3()?;
    let plane = h * w;
    let x = feature.data();
    let norms: Vec<f64> = (0..plane)
        .map(|p| {
            (0..c)
                .map(|ch| x[ch * plane + p].as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut out = vec![0.0; plane];
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let mut sum = 0.0;
            let mut count = 0usize;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, xx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    count += 1;
                    let denom = norms[p] * norms[q];
                    if denom > 0.0 {
                        let dot: f64 = (0..c)
                            .map(|ch| x[ch * plane + p].as_f64() * x[ch * plane + q].as_f64())
                            .sum();
                        sum += dot / denom;
                    }
                }
            }
            if count > 0 {
                out[p] = sum / count as f64;
            }
        }
    }
    Tensor::new([h, w], out)
}

/// The evaluation report written by `dcfm eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub wiou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Keyed by window length; `null` when no video could be scored.
    pub mvc: BTreeMap<String, Option<f64>>,
    pub frames_scored: usize,
}

/// Predictions and ground truth of one video; `gts[i]` is `None` for
/// unlabelled frames.
#[derive(Clone, Debug)]
pub struct VideoEval<'a> {
    pub preds: &'a [LabelMap],
    pub gts: &'a [Option<LabelMap>],
}

/// Accuracy over every labelled frame, and consistency for each length in
/// `vc_lengths` over the videos that are fully labelled and long enough.
pub fn evaluate(
    videos: &[VideoEval<'_>],
    num_classes: usize,
    vc_lengths: &[usize],
) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut frames_scored = 0;
    for v in videos {
        if v.preds.len() != v.gts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} frames",
                v.preds.len(),
                v.gts.len()
            )));
        }
        for (p, g) in v.preds.iter().zip(v.gts) {
            if let Some(g) = g {
                cm.accumulate(p, g)?;
                frames_scored += 1;
            }
        }
    }
    let mut mvc_map = BTreeMap::new();
    for &l in vc_lengths {
        let mut per_video = Vec::new();
        for v in videos {
            if v.gts.len() < l || v.gts.iter().any(Option::is_none) {
                continue;
            }
            let gts: Vec<LabelMap> = v.gts.iter().flatten().cloned().collect();
            if let Some(vc) = video_consistency(v.preds, &gts, l)? {
                per_video.push(vc);
            }
        }
        let value = if per_video.is_empty() {
            log::warn!("no video long enough and fully labelled for VC_{l}");
            None
        } else {
            Some(mvc(&per_video)?)
        };
        mvc_map.insert(l.to_string(), value);
    }
    Ok(MetricsReport {
        miou: cm.miou()?,
        wiou: cm.wiou()?,
        per_class_iou: cm.per_class_iou(),
        mvc: mvc_map,
        frames_scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, d: &[u8]) -> LabelMap {
        LabelMap::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn half_split_all_zero_prediction() {
        let gt = map(1, 4, &[0, 0, 1, 1]);
        let pred = map(1, 4, &[0, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.miou().unwrap(), 0.25);
        assert_eq!(cm.wiou().unwrap(), 0.25);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let gt = map(1, 2, &[0, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn ignore_and_range_checks() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(1, 2, &[0, 1]), &map(1, 2, &[255, 255]))
            .unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
        assert!(cm.accumulate(&map(1, 1, &[2]), &map(1, 1, &[0])).is_err());
    }

    #[test]
    fn consistency_edge_cases() {
        let gts = vec![map(1, 2, &[1, 1]); 3];
        assert_eq!(video_consistency(&gts, &gts, 3).unwrap(), Some(1.0));
        let wrong = vec![map(1, 2, &[0, 0]); 3];
        assert_eq!(video_consistency(&wrong, &gts, 2).unwrap(), Some(0.0));
        assert!(video_consistency(&gts, &gts, 4).is_err());
        let flicker = vec![map(1, 1, &[0]), map(1, 1, &[1])];
        assert_eq!(video_consistency(&flicker, &flicker, 2).unwrap(), None);
    }

    #[test]
    fn cosine_map_constant_and_checkerboard() {
        let flat = Tensor::full([2, 3, 3], 0.5f64);
        assert!(cosine_similarity_map(&flat)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        let checker = Tensor::from_fn([1, 3, 3], |i| if i % 2 == 0 { 1.0f64 } else { -1.0 });
        // centre: 4 edge neighbours at -1, 4 corners at +1
        assert_eq!(cosine_similarity_map(&checker).unwrap().data()[4], 0.0);
    }
}
