//! Brute-force recomputations of the evaluation metrics, written without
//! reference to the confusion matrix or the windowed counting in the library.

use std::collections::HashSet;

use dcfm::label::{LabelMap, IGNORE_LABEL};
use rand::Rng;

/// Scored pixels as `(gt, pred)` pairs.
fn scored(preds: &[LabelMap], gts: &[LabelMap]) -> Vec<(u8, u8)> {
    preds
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| p.data().iter().copied().zip(g.data().iter().copied()))
        .filter(|&(_, g)| g != IGNORE_LABEL)
        .map(|(p, g)| (g, p))
        .collect()
}

fn class_iou(pairs: &[(u8, u8)], c: u8) -> (usize, Option<f64>) {
    let inter = pairs.iter().filter(|&&(g, p)| g == c && p == c).count();
    let union = pairs.iter().filter(|&&(g, p)| g == c || p == c).count();
    let gt = pairs.iter().filter(|&&(g, _)| g == c).count();
    (gt, (union > 0).then(|| inter as f64 / union as f64))
}

pub fn miou(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> f64 {
    let pairs = scored(preds, gts);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes as u8 {
        let (gt, iou) = class_iou(&pairs, c);
        if gt > 0 {
            sum += iou.unwrap();
            n += 1;
        }
    }
    sum / n as f64
}

pub fn wiou(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> f64 {
    let pairs = scored(preds, gts);
    (0..num_classes as u8)
        .map(|c| {
            let (gt, iou) = class_iou(&pairs, c);
            gt as f64 / pairs.len() as f64 * iou.unwrap_or(0.0)
        })
        .sum()
}

fn assignment_set(map: &LabelMap) -> HashSet<(usize, u8)> {
    map.data()
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c != IGNORE_LABEL)
        .map(|(p, &c)| (p, c))
        .collect()
}

fn intersect(sets: impl Iterator<Item = HashSet<(usize, u8)>>) -> HashSet<(usize, u8)> {
    sets.reduce(|a, b| a.intersection(&b).copied().collect())
        .unwrap_or_default()
}

/// Mean over windows of |∩G ∩ ∩P| / |∩G| with (pixel, class) assignment
/// sets; windows with empty ∩G are skipped.
pub fn video_consistency(preds: &[LabelMap], gts: &[LabelMap], l: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut scored = 0usize;
    for s in 0..=preds.len() - l {
        let g = intersect(gts[s..s + l].iter().map(assignment_set));
        if g.is_empty() {
            continue;
        }
        let p = intersect(preds[s..s + l].iter().map(assignment_set));
        sum += g.intersection(&p).count() as f64 / g.len() as f64;
        scored += 1;
    }
    (scored > 0).then(|| sum / scored as f64)
}

/// A random clip of `n` `h x w` maps where each pixel keeps its previous
/// class with probability `stay`; `ignore` is the share of ignore pixels.
pub fn random_sequence(
    rng: &mut impl Rng,
    n: usize,
    h: usize,
    w: usize,
    classes: u8,
    stay: f64,
    ignore: f64,
) -> Vec<LabelMap> {
    let mut cur: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..classes)).collect();
    (0..n)
        .map(|_| {
            for v in cur.iter_mut() {
                if !rng.random_bool(stay) {
                    *v = rng.random_range(0..classes);
                }
            }
            let data = cur
                .iter()
                .map(|&v| {
                    if rng.random_bool(ignore) {
                        IGNORE_LABEL
                    } else {
                        v
                    }
                })
                .collect();
            LabelMap::new(h, w, data).unwrap()
        })
        .collect()
}

/// Predictions derived from `gts`: each pixel is correct with probability
/// `correct`, otherwise a random class.
pub fn noisy_predictions(
    rng: &mut impl Rng,
    gts: &[LabelMap],
    classes: u8,
    correct: f64,
) -> Vec<LabelMap> {
    gts.iter()
        .map(|g| {
            let data = g
                .data()
                .iter()
                .map(|&v| {
                    if v != IGNORE_LABEL && rng.random_bool(correct) {
                        v
                    } else {
                        rng.random_range(0..classes)
                    }
                })
                .collect();
            LabelMap::new(g.height(), g.width(), data).unwrap()
        })
        .collect()
}
