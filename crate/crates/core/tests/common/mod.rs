#![allow(dead_code)]

pub mod oracle;

use dcfm::autograd::{Tape, Var};
use dcfm::dataio::{synth, GenConfig, VideoClip};
use dcfm::gradcheck::relative_error;
use dcfm::model::{Model, ModelConfig};
use dcfm::tensor::Tensor;
use dcfm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Max relative error between analytic and central-difference gradients of
/// the scalar `f(inputs)` with respect to every entry of every input.
pub fn fd_max_error(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let h = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let eval = |k: usize, i: usize, delta: f64| {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut d = t.to_vec();
                if j == k {
                    d[i] += delta;
                }
                tape.input(Tensor::new(t.shape().to_vec(), d).unwrap())
            })
            .collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let g = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let numeric = (eval(k, i, h) - eval(k, i, -h)) / (2.0 * h);
            worst = worst.max(relative_error(g[i], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// element contributes a distinct amount to the gradient.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = rand_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(x, w)?;
    tape.sum(m)
}

/// Small randomly initialized model, fast enough for many forwards.
pub fn small_model(num_classes: usize, seed: u64) -> Model<f32> {
    Model::new(ModelConfig {
        num_classes,
        c_hi: 32,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn gen_config(videos: usize, frames: usize, seed: u64) -> GenConfig {
    GenConfig {
        videos,
        frames_per_video: frames,
        seed,
        ..Default::default()
    }
}

pub fn clip_tensors(cfg: &GenConfig, index: usize) -> Vec<Tensor<f32>> {
    synth::generate_clip(cfg, index)
        .unwrap()
        .frames
        .iter()
        .map(|f| f.to_tensor())
        .collect()
}

pub fn video_clips(cfg: &GenConfig) -> Vec<VideoClip> {
    synth::generate_dataset(cfg)
        .unwrap()
        .iter()
        .map(|c| c.to_video_clip())
        .collect()
}
