//! Symmetric pair training.
//!
//! Each step draws a labelled frame `x_l` and a temporal neighbour `x_u`.
//! `x_l` is segmented twice: once as a keyframe (`l_i`) and once as a
//! non-key frame using the common feature of `x_u` (`l_b`). A masked feature
//! consistency term (`l_c`) pulls the fused features of `x_u` towards those
//! of `x_l` wherever both frames predict the same class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataio::VideoClip;
use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::model::{pad_to_multiple, Model, INPUT_MULTIPLE};
use crate::params::{poly_lr, sgd_step};
use crate::tensor::{argmax_channels, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub use_li: bool,
    pub use_lb: bool,
    pub use_lc: bool,
    /// Random horizontal flip of each pair.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_b: 0.4,
            lambda_c: 10.0,
            base_lr: 0.05,
            momentum: 0.9,
            poly_power: 0.9,
            iters: 2000,
            batch: 4,
            seed: 0,
            use_li: true,
            use_lb: true,
            use_lc: true,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_b >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::Config("lambda_b and lambda_c must be >= 0".into()));
        }
        if self.iters == 0 || self.batch == 0 {
            return Err(Error::Config("iters and batch must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr {} is invalid",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} not in [0,1)",
                self.momentum
            )));
        }
        if !(self.use_li || self.use_lb || self.use_lc) {
            return Err(Error::Config("all loss terms are disabled".into()));
        }
        Ok(())
    }
}

/// Loss values of one pair (or the mean over a batch). Disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total: f64,
    /// Share of coarse positions where both frames predict the same class.
    pub mask_fraction: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l_i += s * o.l_i;
        self.l_b += s * o.l_b;
        self.l_c += s * o.l_c;
        self.total += s * o.total;
        self.mask_fraction += s * o.mask_fraction;
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub l_i: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total: f64,
    pub mask_fraction: f64,
}

/// A labelled frame and the neighbour paired with it.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub clip: usize,
    pub l: usize,
    pub u: usize,
    pub x_l: Tensor<f32>,
    pub y_l: LabelMap,
    pub x_u: Tensor<f32>,
}

impl TrainingPair {
    pub fn flip_horizontal(&self) -> Result<Self> {
        Ok(TrainingPair {
            x_l: self.x_l.flip_horizontal()?,
            y_l: self.y_l.flip_horizontal(),
            x_u: self.x_u.flip_horizontal()?,
            ..self.clone()
        })
    }
}

/// Draws training pairs uniformly over labelled frames that have a neighbour.
#[derive(Clone, Debug)]
pub struct PairSampler {
    /// `(clip, labelled frame)`
    anchors: Vec<(usize, usize)>,
}

impl PairSampler {
    pub fn new(clips: &[VideoClip]) -> Result<Self> {
        let mut anchors = Vec::new();
        for (ci, clip) in clips.iter().enumerate() {
            for &l in clip.labels.keys() {
                if clip.len() < 2 {
                    log::warn!(
                        "clip {}: labelled frame {l} has no neighbour, skipped",
                        clip.id
                    );
                } else {
                    anchors.push((ci, l));
                }
            }
        }
        if anchors.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset has no labelled frame with a temporal neighbour".into(),
            ));
        }
        Ok(PairSampler { anchors })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Returns `(clip, l, u)` with `u` in `{l-1, l+1}`, uniform over the
    /// in-range side(s).
    pub fn sample_indices(&self, clips: &[VideoClip], rng: &mut impl Rng) -> (usize, usize, usize) {
        let (ci, l) = self.anchors[rng.random_range(0..self.anchors.len())];
        let n = clips[ci].len();
        let u = if l == 0 {
            1
        } else if l + 1 >= n || rng.random_bool(0.5) {
            l - 1
        } else {
            l + 1
        };
        (ci, l, u)
    }

    pub fn sample(&self, clips: &[VideoClip], rng: &mut impl Rng) -> Result<TrainingPair> {
        let (ci, l, u) = self.sample_indices(clips, rng);
        let clip = &clips[ci];
        Ok(TrainingPair {
            clip: ci,
            l,
            u,
            x_l: pad_to_multiple(&clip.frames[l], INPUT_MULTIPLE)?,
            y_l: pad_labels(&clip.labels[&l], INPUT_MULTIPLE),
            x_u: pad_to_multiple(&clip.frames[u], INPUT_MULTIPLE)?,
        })
    }
}

/// Convenience wrapper around [`PairSampler`].
pub fn sample_training_pair(clips: &[VideoClip], rng: &mut impl Rng) -> Result<TrainingPair> {
    PairSampler::new(clips)?.sample(clips, rng)
}

/// Extends a label map to multiples of `multiple` with ignore pixels.
pub fn pad_labels(map: &LabelMap, multiple: usize) -> LabelMap {
    let (h, w) = (map.height(), map.width());
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    if (ph, pw) == (h, w) {
        return map.clone();
    }
    let mut data = vec![IGNORE_LABEL; ph * pw];
    for y in 0..h {
        data[y * pw..y * pw + w].copy_from_slice(&map.data()[y * w..(y + 1) * w]);
    }
    LabelMap::new(ph, pw, data).expect("padded buffer sized to grid")
}

/// 1 where the per-pixel argmax (lowest index on ties) of the two logit maps
/// agree, else 0. Shape `[h,w]`.
pub fn compute_mask<T: Scalar>(coarse_u: &Tensor<T>, coarse_l: &Tensor<T>) -> Result<Tensor<T>> {
    if coarse_u.shape() != coarse_l.shape() {
        return Err(Error::Shape(format!(
            "mask operands {:?} vs {:?}",
            coarse_u.shape(),
            coarse_l.shape()
        )));
    }
    let (_, h, w) = coarse_u.dims3()?;
    let a = argmax_channels(coarse_u)?;
    let b = argmax_channels(coarse_l)?;
    let data: Vec<T> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| if x == y { T::one() } else { T::zero() })
        .collect();
    Tensor::new([h, w], data)
}

/// The constant side of the consistency term: the agreement mask and the
/// fused feature of `x_l` it is compared against.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTarget<T> {
    pub mask: Tensor<T>,
    pub target: Tensor<T>,
}

/// Graph handles and values of one pair's joint loss.
#[derive(Clone, Debug)]
pub struct JointLoss<T> {
    pub breakdown: LossBreakdown,
    /// Scalar total loss on the tape.
    pub total: Var,
    /// Fused feature of `x_l`, keyframe branch.
    pub fused_l: Var,
    /// Fused feature of `x_u`; absent when neither `l_b` nor `l_c` is enabled.
    pub fused_u: Option<Var>,
    /// Absent when neither `l_b` nor `l_c` is enabled.
    pub consistency: Option<ConsistencyTarget<T>>,
}

/// Records the joint loss of one pair on `tape`.
///
/// `total = [use_li] l_i + [use_lb] lambda_b l_b + [use_lc] lambda_c l_c`.
pub fn compute_joint_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x_l: &Tensor<T>,
    y_l: &LabelMap,
    x_u: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<JointLoss<T>> {
    compute_joint_loss_with(model, tape, x_l, y_l, x_u, cfg, None)
}

/// [`compute_joint_loss`] with the consistency mask and target supplied
/// instead of derived from the current parameters. Differentiating through
/// a fixed target is what the analytic gradient computes, so this is the
/// function finite differences must probe.
pub fn compute_joint_loss_with<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x_l: &Tensor<T>,
    y_l: &LabelMap,
    x_u: &Tensor<T>,
    cfg: &TrainConfig,
    frozen: Option<&ConsistencyTarget<T>>,
) -> Result<JointLoss<T>> {
    if x_l.shape() != x_u.shape() {
        return Err(Error::Shape(format!(
            "pair frames differ: {:?} vs {:?}",
            x_l.shape(),
            x_u.shape()
        )));
    }
    y_l.validate(model.config().num_classes)?;
    let xl = tape.input(x_l.clone());
    let vl = model.keyframe_graph(tape, xl)?;
    let l_i = tape.softmax_cross_entropy(vl.full, y_l, IGNORE_LABEL)?;
    let mut terms = Vec::with_capacity(3);
    if cfg.use_li {
        terms.push((l_i, T::one()));
    }
    let mut breakdown = LossBreakdown {
        l_i: tape.value(l_i).item().as_f64(),
        ..Default::default()
    };
    let mut fused_u = None;
    let mut consistency = None;
    if cfg.use_lb || cfg.use_lc {
        let xu = tape.input(x_u.clone());
        let vu = model.keyframe_graph(tape, xu)?;
        fused_u = Some(vu.fused);
        let (mask, target) = match frozen {
            Some(f) => (f.mask.clone(), f.target.clone()),
            None => (
                compute_mask(tape.value(vu.coarse), tape.value(vl.coarse))?,
                tape.value(vl.fused).clone(),
            ),
        };
        breakdown.mask_fraction =
            mask.data().iter().map(|m| m.as_f64()).sum::<f64>() / mask.len() as f64;
        if cfg.use_lb {
            // x_l as a non-key frame: its own independent feature with x_u's common feature
            let fused_ul = model.fuse_graph(tape, vu.common, vl.indep)?;
            let (_, full_ul) = model.decode_graph(tape, fused_ul)?;
            let l_b = tape.softmax_cross_entropy(full_ul, y_l, IGNORE_LABEL)?;
            breakdown.l_b = tape.value(l_b).item().as_f64();
            terms.push((l_b, T::lit(cfg.lambda_b)));
        }
        if cfg.use_lc {
            let target = tape.constant(target.clone());
            let l_c = tape.mse_masked(vu.fused, target, &mask)?;
            breakdown.l_c = tape.value(l_c).item().as_f64();
            terms.push((l_c, T::lit(cfg.lambda_c)));
        }
        consistency = Some(ConsistencyTarget { mask, target });
    }
    let total = tape.weighted_sum(&terms)?;
    breakdown.total = tape.value(total).item().as_f64();
    Ok(JointLoss {
        breakdown,
        total,
        fused_l: vl.fused,
        fused_u,
        consistency,
    })
}

fn diverged(iter: usize, lr: f64, b: &LossBreakdown, cause: impl Into<String>) -> Error {
    Error::Diverged {
        iter,
        lr,
        l_i: b.l_i,
        l_b: b.l_b,
        l_c: b.l_c,
        cause: cause.into(),
    }
}

/// Mean joint loss over `pairs`, one backward pass, one SGD update at the
/// poly-decayed learning rate for `iter`. Returns the pre-update breakdown.
pub fn train_step(
    model: &mut Model<f32>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<LossBreakdown> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let lr = poly_lr(iter, cfg.iters, cfg.base_lr, cfg.poly_power);
    let weight = 1.0 / pairs.len() as f64;
    let mut mean = LossBreakdown::default();
    model.params_mut().zero_grad();
    for pair in pairs {
        let mut tape = Tape::new();
        let joint = compute_joint_loss(model, &mut tape, &pair.x_l, &pair.y_l, &pair.x_u, cfg)
            .map_err(|e| match e {
                Error::NonFinite { op } => {
                    diverged(iter, lr, &mean, format!("non-finite value in {op}"))
                }
                other => other,
            })?;
        mean.add_scaled(&joint.breakdown, weight);
        let scaled = tape.scale(joint.total, weight as f32)?;
        tape.backward(scaled, model.params_mut())
            .map_err(|e| diverged(iter, lr, &mean, e.to_string()))?;
    }
    let finite_grads = model.params().iter().all(|p| {
        p.grad
            .as_ref()
            .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    });
    if !finite_grads {
        return Err(diverged(iter, lr, &mean, "non-finite gradient"));
    }
    sgd_step(model.params_mut(), lr as f32, cfg.momentum as f32);
    if !model.params().iter().all(|p| p.value.all_finite()) {
        return Err(diverged(
            iter,
            lr,
            &mean,
            "non-finite parameter after update",
        ));
    }
    Ok(mean)
}

/// Runs `cfg.iters` steps on `clips`, calling `on_log` after every step.
pub fn train_with(
    model: &mut Model<f32>,
    clips: &[VideoClip],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for clip in clips {
        clip.validate(model.config().num_classes)?;
    }
    let sampler = PairSampler::new(clips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iter in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pair = sampler.sample(clips, &mut rng)?;
            let flip = cfg.hflip && rng.random_bool(0.5);
            batch.push(if flip { pair.flip_horizontal()? } else { pair });
        }
        let b = train_step(model, &batch, cfg, iter)?;
        on_log(&LogEntry {
            iter,
            lr: poly_lr(iter, cfg.iters, cfg.base_lr, cfg.poly_power),
            l_i: b.l_i,
            l_b: b.l_b,
            l_c: b.l_c,
            total: b.total,
            mask_fraction: b.mask_fraction,
        })?;
    }
    Ok(())
}

/// [`train_with`], collecting the log.
pub fn train(
    model: &mut Model<f32>,
    clips: &[VideoClip],
    cfg: &TrainConfig,
) -> Result<Vec<LogEntry>> {
    let mut log = Vec::with_capacity(cfg.iters);
    train_with(model, clips, cfg, |e| {
        if e.iter % 100 == 0 {
            log::info!("iter {} lr {:.4} total {:.4}", e.iter, e.lr, e.total);
        }
        log.push(*e);
        Ok(())
    })?;
    Ok(log)
}
