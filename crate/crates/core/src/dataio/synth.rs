//! Deterministic moving-shapes videos with exact per-pixel labels.
//!
//! Each clip has a static textured background (class 0) and a handful of
//! rectangles and disks (classes `1..classes`) moving with constant velocity
//! and bouncing off the frame borders. Labels are rasterized at pixel centres
//! in painter's order, so they are exact; noise is applied to frames only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, DatasetManifest, ManifestVideo};
use super::netpbm::{write_pgm, write_ppm};
use super::{RgbImage, VideoClip};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::model::INPUT_MULTIPLE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Every frame labelled.
    Dense,
    /// Only the middle frame of each clip labelled.
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes_per_video: usize,
    /// Upper bound on per-axis speed, pixels per frame.
    pub max_speed: f64,
    pub noise_sigma: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            videos: 20,
            frames_per_video: 12,
            height: 48,
            width: 64,
            classes: 4,
            shapes_per_video: 3,
            max_speed: 2.0,
            noise_sigma: 2.0,
            label_mode: LabelMode::Dense,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "classes must be in 2..=255, got {}",
                self.classes
            )));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(INPUT_MULTIPLE)
            || !self.width.is_multiple_of(INPUT_MULTIPLE)
        {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of {INPUT_MULTIPLE}",
                self.height, self.width
            )));
        }
        if self.frames_per_video == 0 {
            return Err(Error::Config("frames_per_video must be at least 1".into()));
        }
        if !(self.max_speed >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config(
                "max_speed and noise_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Frame indices that carry labels.
    pub fn labelled_indices(&self) -> Vec<usize> {
        match self.label_mode {
            LabelMode::Dense => (0..self.frames_per_video).collect(),
            LabelMode::Sparse => vec![self.frames_per_video / 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
}

impl ShapeKind {
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            ShapeKind::Rect { half_w, half_h } => (half_w, half_h),
            ShapeKind::Disk { radius } => (radius, radius),
        }
    }

    /// Whether a point at offset `(dx, dy)` from the centre is covered.
    pub fn covers(&self, dx: f64, dy: f64) -> bool {
        match *self {
            ShapeKind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            ShapeKind::Disk { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

/// One moving shape: its geometry, class, colour and linear motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub class: u8,
    pub color: [u8; 3],
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

/// Position on `[lo, hi]` after bouncing between the ends.
fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl ShapeTrack {
    /// Centre at frame `t` in a `width x height` frame.
    pub fn center_at(&self, t: usize, width: usize, height: usize) -> (f64, f64) {
        let (hx, hy) = self.kind.half_extent();
        let x = self.start.0 + self.velocity.0 * t as f64;
        let y = self.start.1 + self.velocity.1 * t as f64;
        (
            bounce(x, hx, width as f64 - hx),
            bounce(y, hy, height as f64 - hy),
        )
    }
}

/// A generated clip kept in memory, along with its scene description.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub id: String,
    pub frames: Vec<RgbImage>,
    /// Labels for every frame, regardless of label mode.
    pub labels: Vec<LabelMap>,
    /// Frames whose labels are published.
    pub labelled: Vec<usize>,
    pub shapes: Vec<ShapeTrack>,
}

impl SyntheticClip {
    /// Tensor view with only the published labels attached.
    pub fn to_video_clip(&self) -> VideoClip {
        VideoClip {
            id: self.id.clone(),
            frames: self.frames.iter().map(RgbImage::to_tensor).collect(),
            labels: self
                .labelled
                .iter()
                .map(|&i| (i, self.labels[i].clone()))
                .collect::<BTreeMap<_, _>>(),
        }
    }
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    // saturation 0.85, value 0.95
    let (s, v) = (0.85, 0.95 * 255.0);
    let h = hue.rem_euclid(1.0) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h.floor() as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_color(class: u8, classes: usize) -> [f64; 3] {
    hue_to_rgb((class as f64 - 1.0) / (classes - 1) as f64)
}

struct Background {
    base: [f64; 3],
    amplitude: f64,
    freq: (f64, f64),
    phase: f64,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let grey = rng.random_range(70.0..130.0);
        Background {
            base: [
                grey + rng.random_range(-10.0..10.0),
                grey + rng.random_range(-10.0..10.0),
                grey + rng.random_range(-10.0..10.0),
            ],
            amplitude: rng.random_range(10.0..25.0),
            freq: (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let t =
            self.amplitude * (self.freq.0 * x as f64 + self.freq.1 * y as f64 + self.phase).sin();
        self.base.map(|b| b + t)
    }
}

/// Class of every pixel at frame `t`, rasterized at pixel centres.
pub fn rasterize_labels(shapes: &[ShapeTrack], t: usize, width: usize, height: usize) -> LabelMap {
    let mut data = vec![0u8; width * height];
    for s in shapes {
        let (cx, cy) = s.center_at(t, width, height);
        for y in 0..height {
            for x in 0..width {
                if s.kind.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                    data[y * width + x] = s.class;
                }
            }
        }
    }
    LabelMap::new(height, width, data).expect("label buffer sized to frame")
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates clip `index` of the dataset described by `cfg`.
pub fn generate_clip(cfg: &GenConfig, index: usize) -> Result<SyntheticClip> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = clip_rng(cfg.seed, index);
    let background = Background::sample(&mut rng);
    let min_dim = w.min(h) as f64;
    let class_offset = rng.random_range(0..cfg.classes - 1);
    let shapes: Vec<ShapeTrack> = (0..cfg.shapes_per_video)
        .map(|k| {
            let class = (1 + (class_offset + k) % (cfg.classes - 1)) as u8;
            let size = |rng: &mut ChaCha8Rng| rng.random_range(min_dim / 8.0..min_dim / 4.0);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect {
                    half_w: size(&mut rng),
                    half_h: size(&mut rng),
                }
            } else {
                ShapeKind::Disk {
                    radius: size(&mut rng),
                }
            };
            let (hx, hy) = kind.half_extent();
            let start = (
                rng.random_range(hx..w as f64 - hx),
                rng.random_range(hy..h as f64 - hy),
            );
            let velocity = if cfg.max_speed > 0.0 {
                (
                    rng.random_range(-cfg.max_speed..=cfg.max_speed),
                    rng.random_range(-cfg.max_speed..=cfg.max_speed),
                )
            } else {
                (0.0, 0.0)
            };
            let base = class_color(class, cfg.classes);
            let color = base.map(|c| {
                (c + rng.random_range(-12.0..12.0))
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            ShapeTrack {
                kind,
                class,
                color,
                start,
                velocity,
            }
        })
        .collect();

    let noise =
        (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut labels = Vec::with_capacity(cfg.frames_per_video);
    for t in 0..cfg.frames_per_video {
        let label = rasterize_labels(&shapes, t, w, h);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let class = label.get(y, x);
                let rgb = if class == 0 {
                    background.at(x, y)
                } else {
                    // topmost shape of this class at this pixel supplies the colour
                    let s = shapes
                        .iter()
                        .rev()
                        .find(|s| {
                            let (cx, cy) = s.center_at(t, w, h);
                            s.kind.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy)
                        })
                        .expect("labelled pixel is covered by a shape");
                    s.color.map(f64::from)
                };
                for c in rgb {
                    let v = match &noise {
                        Some(n) => c + n.sample(&mut rng),
                        None => c,
                    };
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        frames.push(RgbImage::new(w, h, pixels)?);
        labels.push(label);
    }
    Ok(SyntheticClip {
        id: format!("clip_{index:03}"),
        frames,
        labels,
        labelled: cfg.labelled_indices(),
        shapes,
    })
}

/// Generates every clip in memory.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<SyntheticClip>> {
    (0..cfg.videos).map(|i| generate_clip(cfg, i)).collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

pub fn label_file_name(index: usize) -> String {
    format!("label_{index:05}.pgm")
}

/// Writes the dataset as `out_dir/manifest.json` plus one directory per clip
/// holding `frame_NNNNN.ppm` and `label_NNNNN.pgm` files.
pub fn generate_synthetic(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut videos = Vec::with_capacity(cfg.videos);
    for i in 0..cfg.videos {
        let clip = generate_clip(cfg, i)?;
        let dir = out_dir.join(&clip.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::with_capacity(clip.frames.len());
        for (t, frame) in clip.frames.iter().enumerate() {
            let name = frame_file_name(t);
            write_ppm(dir.join(&name), frame)?;
            frames.push(format!("{}/{name}", clip.id));
        }
        let mut labels = BTreeMap::new();
        for &t in &clip.labelled {
            let name = label_file_name(t);
            write_pgm(dir.join(&name), &clip.labels[t])?;
            labels.insert(t, format!("{}/{name}", clip.id));
        }
        videos.push(ManifestVideo {
            id: clip.id,
            frames,
            labels,
        });
    }
    let manifest = DatasetManifest {
        num_classes: cfg.classes,
        height: cfg.height,
        width: cfg.width,
        videos,
    };
    write_manifest(out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounce_reflects_off_both_ends() {
        assert_eq!(bounce(5.0, 0.0, 10.0), 5.0);
        assert_eq!(bounce(12.0, 0.0, 10.0), 8.0);
        assert_eq!(bounce(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(bounce(23.0, 0.0, 10.0), 3.0);
    }

    #[test]
    fn clips_are_deterministic_and_distinct() {
        let cfg = GenConfig {
            videos: 2,
            frames_per_video: 3,
            ..Default::default()
        };
        let a = generate_clip(&cfg, 0).unwrap();
        let b = generate_clip(&cfg, 0).unwrap();
        let c = generate_clip(&cfg, 1).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn static_noiseless_clip_repeats_frames() {
        let cfg = GenConfig {
            frames_per_video: 4,
            max_speed: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let clip = generate_clip(&cfg, 0).unwrap();
        assert!(clip.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn sparse_mode_labels_middle_frame() {
        let cfg = GenConfig {
            frames_per_video: 12,
            label_mode: LabelMode::Sparse,
            ..Default::default()
        };
        assert_eq!(cfg.labelled_indices(), vec![6]);
        let clip = generate_clip(&cfg, 0).unwrap().to_video_clip();
        assert_eq!(clip.labels.keys().copied().collect::<Vec<_>>(), vec![6]);
    }

    #[test]
    fn rejects_sizes_off_the_grid() {
        let cfg = GenConfig {
            height: 50,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
