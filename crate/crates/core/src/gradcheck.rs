//! Central finite-difference check of the joint training loss in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::model::{Model, ModelConfig, INPUT_MULTIPLE};
use crate::tensor::Tensor;
use crate::training::{
    compute_joint_loss, compute_joint_loss_with, ConsistencyTarget, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Entries sampled from each parameter tensor (fewer if it is smaller).
    pub per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Loss weights and toggles.
    pub train: TrainConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1,
            height: 16,
            width: 16,
            num_classes: 3,
            per_tensor: 8,
            step: 1e-5,
            tolerance: 1e-4,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    /// Parameter tensors with at least one checked entry.
    pub tensors_covered: usize,
    pub tensors_total: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / scale
}

struct Problem {
    x_l: Tensor<f64>,
    y_l: LabelMap,
    x_u: Tensor<f64>,
    train: TrainConfig,
    frozen: Option<ConsistencyTarget<f64>>,
}

impl Problem {
    fn loss(&self, model: &Model<f64>) -> Result<f64> {
        let mut tape = Tape::inference();
        let j = compute_joint_loss_with(
            model,
            &mut tape,
            &self.x_l,
            &self.y_l,
            &self.x_u,
            &self.train,
            self.frozen.as_ref(),
        )?;
        Ok(j.breakdown.total)
    }
}

/// Compares analytic gradients of the joint loss (all terms enabled) with
/// central differences on randomly sampled entries of every parameter tensor.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !cfg.height.is_multiple_of(INPUT_MULTIPLE)
        || !cfg.width.is_multiple_of(INPUT_MULTIPLE)
        || cfg.height == 0
        || cfg.width == 0
    {
        return Err(Error::Config(format!(
            "gradcheck size {}x{} must be a positive multiple of {INPUT_MULTIPLE}",
            cfg.height, cfg.width
        )));
    }
    if cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Error::Config("step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model_cfg = ModelConfig {
        num_classes: cfg.num_classes,
        c_hi: 16,
        seed: cfg.seed,
        ..Default::default()
    };
    model_cfg.validate()?;
    let mut model: Model<f64> = Model::<f32>::new(model_cfg)?.cast();
    let (h, w) = (cfg.height, cfg.width);
    let x_l: Tensor<f64> = Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..255.0));
    // a neighbouring frame: same content plus a small perturbation
    let x_u: Tensor<f64> = Tensor::from_fn([3, h, w], |i| {
        (x_l.data()[i] + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0)
    });
    let y_l = LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|_| rng.random_range(0..cfg.num_classes as u8))
            .collect(),
    )?;
    let mut tape = Tape::new();
    let joint = compute_joint_loss(&model, &mut tape, &x_l, &y_l, &x_u, &cfg.train)?;
    let mut grads = model.params().clone();
    tape.backward(joint.total, &mut grads)?;
    // the consistency target and mask are constants of the loss
    let problem = Problem {
        x_l,
        y_l,
        x_u,
        train: cfg.train.clone(),
        frozen: joint.consistency,
    };

    let mut entries = Vec::new();
    let mut covered = 0;
    let total = model.params().len();
    for idx in 0..total {
        let (name, value) = {
            let p = model.params().get(idx);
            (p.name.clone(), p.value.clone())
        };
        let analytic = grads
            .get(idx)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; value.len()]);
        let picks = sample(&mut rng, value.len(), cfg.per_tensor.min(value.len()));
        let mut any = false;
        for i in picks {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = value.to_vec();
                data[i] += delta;
                model
                    .params_mut()
                    .set_value(idx, Tensor::new(value.shape().to_vec(), data)?)?;
                problem.loss(&model)
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            model.params_mut().set_value(idx, value.clone())?;
            entries.push(GradcheckEntry {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric),
            });
            any = true;
        }
        covered += usize::from(any);
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tolerance && covered == total && entries.len() >= 100,
        entries,
        max_rel_error,
        tensors_covered: covered,
        tensors_total: total,
    })
}
